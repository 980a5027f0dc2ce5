from flask import Blueprint, current_app, jsonify, request
from pydantic import BaseModel, Field, ValidationError

from ..errors import GenerationError, InvalidInputError
from ..lmkb.sdg import generate, split_rendered

generate_bp = Blueprint("generate", __name__)


class GenerateRequest(BaseModel):
    prompt: str = Field(min_length=1)
    temperature: float = Field(ge=0)
    max_tokens: int = Field(ge=1)
    seed: int = Field(0, ge=0)


@generate_bp.route("", methods=["POST"])
def generate_text():
    """Generate one candidate for a rendered prompt"""
    data = request.get_json(silent=True)
    if data is None:
        return jsonify({"error": "Request body must be JSON"}), 400

    try:
        req = GenerateRequest.model_validate(data)
        prompt = split_rendered(req.prompt)
    except ValidationError as e:
        return jsonify({"error": "Invalid request", "details": [{"loc": list(err["loc"]), "msg": err["msg"]} for err in e.errors()]}), 400
    except InvalidInputError as e:
        return jsonify({"error": str(e)}), 400

    backend = current_app.config["GENERATION_BACKEND"]
    try:
        result = generate(prompt, req.temperature, req.max_tokens, backend, req.seed)
    except GenerationError as e:
        current_app.logger.warning("generation failed: %s", e)
        return jsonify({"error": str(e)}), 503

    return jsonify({"text": result.text})
