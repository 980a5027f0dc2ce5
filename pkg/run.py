from dotenv import load_dotenv
from pathlib import Path

# Load .env.development or fallback to .env
env_path = Path(".env.development")
load_dotenv(dotenv_path=env_path)

from semkb.app import create_app
from semkb.config import ExperimentConfig, Settings
from semkb.experiments import build_backbone
from semkb.services.backends import create_backend
from semkb.utils.corpus import synth_dataset

settings = Settings.from_env()
cfg = ExperimentConfig()
corpus = synth_dataset(cfg.dataset, seed=0, instruction=cfg.sdg.instruction)
model = None
if settings.server_backend == "toy":
    model, _, _ = build_backbone(cfg, corpus, seed=0)

backend = create_backend(
    settings.server_backend,
    corpus.vocab,
    model=model,
    thesaurus=corpus.thesaurus,
    distractors=corpus.distractors,
    hallucination_rate=cfg.sdg.hallucination_rate,
)
app = create_app(backend)

if __name__ == "__main__":
    app.run(host="0.0.0.0", port=settings.port, debug=settings.debug)
