import hashlib
import json
import math
import os
from pathlib import Path
from typing import List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import InvalidConfigError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

# Load .env.development or fallback to .env
load_dotenv(dotenv_path=Path(".env.development"))
load_dotenv()


class Settings(BaseModel):
    """Process-level settings read from the environment"""

    remote_url: Optional[str] = None
    remote_timeout: float = Field(10.0, gt=0)
    max_inflight: int = Field(4, ge=1)
    workers: int = Field(1, ge=1)
    server_backend: Literal["mock", "toy"] = "mock"
    port: int = 5000
    debug: bool = False

    @classmethod
    def from_env(cls) -> "Settings":
        try:
            return cls(
                remote_url=os.getenv("SEMKB_REMOTE_URL") or None,
                remote_timeout=float(os.getenv("SEMKB_REMOTE_TIMEOUT", 10.0)),
                max_inflight=int(os.getenv("SEMKB_MAX_INFLIGHT", 4)),
                workers=int(os.getenv("SEMKB_WORKERS", 1)),
                server_backend=os.getenv("SEMKB_SERVER_BACKEND", "mock"),
                port=int(os.getenv("PORT", 5000)),
                debug=os.getenv("FLASK_ENV") == "development",
            )
        except (ValueError, ValidationError) as e:
            raise InvalidConfigError(f"bad environment settings: {e}") from e


# -------------------------------------------------------------------------------------------------
# Experiment configuration
# -------------------------------------------------------------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class ChannelSection(_Section):
    model_tag: Literal["LOS_like", "NLOS_like"] = "LOS_like"
    n_r: int = Field(16, ge=1)
    n_t: int = Field(16, ge=1)
    doppler_hz: float = Field(10.0, ge=0)
    k_factor_db: float = 10.0
    sample_interval_ms: float = Field(1.0, gt=0)
    n_paths: int = Field(16, ge=1)
    n_users: int = Field(8, ge=1)
    # channel model for evaluation users; unset means same as training
    eval_model_tag: Optional[Literal["LOS_like", "NLOS_like"]] = None
    los_fan_deg: float = Field(120.0, gt=0, le=360)
    csi_file: Optional[str] = None


class MimoSection(_Section):
    d: int = Field(4, ge=1)
    equalize: bool = False
    feedback_bits: Optional[int] = Field(None, ge=1)


class CdgSection(_Section):
    t_his: int = Field(16, ge=1)
    t_pre: int = Field(4, ge=1)
    l_patch: int = Field(4, ge=1)
    stride: int = Field(2, ge=1)
    d_e: int = Field(32, ge=1)
    lam: float = Field(1.0, ge=0, alias="lambda")
    epochs: int = Field(30, ge=0)
    lr: float = Field(0.05, ge=0)
    warm_start: bool = True


class SdgSection(_Section):
    backend: Literal["mock", "toy", "remote"] = "mock"
    tau: float = Field(1.0, ge=0)
    max_len: int = Field(24, ge=1)
    hallucination_rate: float = Field(0.0, ge=0, le=1)
    instruction: str = Field("Rewrite the caption", min_length=1)
    reorder: bool = False


class CdfcSection(_Section):
    gamma: float = Field(0.5, ge=-1, le=1)
    max_retries: int = Field(5, ge=1)
    fusion_pairing: Literal["cross", "matched"] = "cross"
    n_feat: int = Field(16, ge=1)
    d_emb: int = Field(32, ge=1)
    d_hidden: int = Field(32, ge=1)
    epochs: int = Field(20, ge=0)
    lr: float = Field(0.1, ge=0)
    batch_size: int = Field(8, ge=1)
    train_snr_db: float = 10.0


class SweepSection(_Section):
    snr_grid_db: List[float] = Field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0, 25.0], min_length=1)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    # 0 stands for unquantized feedback
    feedback_grid: List[int] = Field(default_factory=lambda: [32, 64, 128, 256, 0], min_length=1)
    feedback_snr_db: float = 15.0

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, seeds):
        if any(s < 0 for s in seeds):
            raise ValueError("seeds must be non-negative")
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"seeds must be distinct, got {seeds}")
        return seeds

    @field_validator("feedback_grid")
    @classmethod
    def _non_negative_bits(cls, grid):
        if any(b < 0 for b in grid):
            raise ValueError("feedback bits must be >= 0")
        return grid


class DatasetSection(_Section):
    n_classes: int = Field(16, ge=2)
    captions_per_class: int = Field(5, ge=1)
    vocab_size: int = Field(128, ge=1)
    gallery_per_class: int = Field(1, ge=1)
    d_gallery: int = Field(16, ge=1)


class AblationSection(_Section):
    disable_sdg: bool = False
    disable_cdg: bool = False


class LmkbSection(_Section):
    backbone: Literal["toy", "mock"] = "toy"
    l_depth: int = Field(2, ge=0)
    d_llm: int = Field(32, ge=1)
    heads: int = Field(2, ge=1)
    max_seq: int = Field(64, ge=1)
    pretrain_epochs: int = Field(2, ge=0)
    pretrain_lr: float = Field(0.05, ge=0)
    unfreeze_backbone: bool = False


class ExperimentConfig(_Section):
    channel: ChannelSection = ChannelSection()
    mimo: MimoSection = MimoSection()
    cdg: CdgSection = CdgSection()
    sdg: SdgSection = SdgSection()
    cdfc: CdfcSection = CdfcSection()
    sweep: SweepSection = SweepSection()
    dataset: DatasetSection = DatasetSection()
    ablations: AblationSection = AblationSection()
    lmkb: LmkbSection = LmkbSection()

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.cdg.d_e != self.lmkb.d_llm:
            raise ValueError(f"cdg.d_e ({self.cdg.d_e}) must equal lmkb.d_llm ({self.lmkb.d_llm})")
        if self.lmkb.d_llm % self.lmkb.heads:
            raise ValueError("lmkb.d_llm must be divisible by lmkb.heads")
        if self.cdg.l_patch > self.cdg.t_his:
            raise ValueError("cdg.l_patch must not exceed cdg.t_his")
        if self.mimo.d > min(self.channel.n_r, self.channel.n_t):
            raise ValueError("mimo.d must not exceed min(n_r, n_t)")
        if math.isnan(self.channel.k_factor_db):
            raise ValueError("channel.k_factor_db must be a number")
        return self


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        fields = ", ".join(".".join(str(p) for p in err["loc"]) or "<root>" for err in e.errors())
        raise InvalidConfigError(f"invalid config ({fields}): {e}") from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise InvalidConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise InvalidConfigError(f"config file {path} is not valid TOML: {e}") from e
    return parse_config(data)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON dump"""
    canonical = json.dumps(cfg.model_dump(by_alias=True), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
