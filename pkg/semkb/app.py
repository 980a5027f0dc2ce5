from flask import Flask

from .routes.generate import generate_bp


def create_app(backend):
    """Generation server answering the remote-backend wire protocol"""
    app = Flask(__name__)
    app.config["MAX_CONTENT_LENGTH"] = 1 * 1024 * 1024
    app.config["GENERATION_BACKEND"] = backend

    app.register_blueprint(generate_bp, url_prefix="/generate")

    return app
