"""
Value types for the MIMO link: channel realizations, traces, SVD triples and
link configuration
"""

from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, NumericDomainError, ShapeError


class ModelTag(str, Enum):
    LOS_LIKE = "LOS_like"
    NLOS_LIKE = "NLOS_like"
    FROM_FILE = "FromFile"


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """One N_r x N_t channel matrix at sample ``t_index``"""

    h: np.ndarray
    t_index: int
    sample_interval_ms: float

    def __post_init__(self):
        if self.h.ndim != 2 or min(self.h.shape) < 1:
            raise ShapeError(f"channel matrix must be N_r x N_t, got shape {self.h.shape}")
        if not np.all(np.isfinite(self.h)):
            raise NumericDomainError("channel matrix has non-finite entries")

    @property
    def n_r(self) -> int:
        return self.h.shape[0]

    @property
    def n_t(self) -> int:
        return self.h.shape[1]


@dataclass(frozen=True, eq=False)
class ChannelTrace:
    """
    Time sequence of channel matrices

    Stored as one complex array ``h`` of shape [T, N_r, N_t] with a matching
    strictly increasing ``t_index``. ``realizations`` yields the per-sample
    view. A trace may be empty (T = 0); consumers that need samples reject it.
    """

    h: np.ndarray
    t_index: np.ndarray
    sample_interval_ms: float = 1.0
    model_tag: ModelTag = ModelTag.FROM_FILE

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.complex128)
        t_index = np.asarray(self.t_index, dtype=np.int64)
        if h.ndim != 3:
            raise ShapeError(f"trace must be [T, N_r, N_t], got shape {h.shape}")
        if h.shape[1] < 1 or h.shape[2] < 1:
            raise InvalidConfigError("trace needs at least one antenna on each side")
        if t_index.shape != (h.shape[0],):
            raise ShapeError(f"t_index length {t_index.shape} does not match T={h.shape[0]}")
        if t_index.size > 1 and np.any(np.diff(t_index) <= 0):
            raise InvalidInputError("t_index must be strictly increasing")
        if not np.all(np.isfinite(h)):
            raise NumericDomainError("trace has non-finite entries")
        if self.sample_interval_ms <= 0:
            raise InvalidConfigError("sample_interval_ms must be positive")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "t_index", t_index)

    @classmethod
    def from_realizations(cls, realizations, model_tag: ModelTag = ModelTag.FROM_FILE) -> "ChannelTrace":
        realizations = list(realizations)
        if not realizations:
            raise InvalidInputError("cannot build a trace from zero realizations")
        shapes = {r.h.shape for r in realizations}
        if len(shapes) != 1:
            raise ShapeError(f"realizations disagree on N_r x N_t: {sorted(shapes)}")
        return cls(
            h=np.stack([r.h for r in realizations]),
            t_index=np.array([r.t_index for r in realizations]),
            sample_interval_ms=realizations[0].sample_interval_ms,
            model_tag=model_tag,
        )

    def __len__(self) -> int:
        return self.h.shape[0]

    @property
    def n_r(self) -> int:
        return self.h.shape[1]

    @property
    def n_t(self) -> int:
        return self.h.shape[2]

    @property
    def realizations(self) -> Iterator[ChannelRealization]:
        for k in range(len(self)):
            yield ChannelRealization(self.h[k], int(self.t_index[k]), self.sample_interval_ms)

    def window(self, start: int, stop: int) -> "ChannelTrace":
        """Contiguous sub-trace ``[start, stop)``"""
        return ChannelTrace(
            h=self.h[start:stop],
            t_index=self.t_index[start:stop],
            sample_interval_ms=self.sample_interval_ms,
            model_tag=self.model_tag,
        )


@dataclass(frozen=True)
class ChannelModelParams:
    """Parameters of the Rician sum-of-sinusoids generator"""

    n_r: int = 16
    n_t: int = 16
    doppler_hz: float = 10.0
    n_paths: int = 16
    k_factor_db: float = 10.0
    sample_interval_ms: float = 1.0
    model_tag: ModelTag = ModelTag.LOS_LIKE
    # LOS departure / arrival angles; drawn from the seed when unset
    aod_deg: Optional[float] = None
    aoa_deg: Optional[float] = None

    def __post_init__(self):
        if self.n_r < 1 or self.n_t < 1:
            raise InvalidConfigError(f"need at least one antenna per side, got {self.n_r}x{self.n_t}")
        if self.n_paths < 1:
            raise InvalidConfigError("n_paths must be >= 1")
        if self.doppler_hz < 0:
            raise InvalidConfigError("doppler_hz must be non-negative")
        if self.sample_interval_ms <= 0:
            raise InvalidConfigError("sample_interval_ms must be positive")

    @property
    def k_linear(self) -> float:
        if self.model_tag == ModelTag.NLOS_LIKE:
            return 0.0
        return float(10.0 ** (self.k_factor_db / 10.0))


@dataclass(frozen=True, eq=False)
class SvdTriple:
    """H = u @ sigma @ v^H with singular values sorted non-increasing"""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def singular_values(self) -> np.ndarray:
        return np.diagonal(self.sigma).real

    @property
    def n_r(self) -> int:
        return self.u.shape[0]

    @property
    def n_t(self) -> int:
        return self.v.shape[0]


@dataclass(frozen=True)
class PrecodeConfig:
    d: int = 4
    equalize: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise InvalidConfigError(f"stream count d must be >= 1, got {self.d}")

    def check(self, n_r: int, n_t: int):
        if self.d > min(n_r, n_t):
            raise InvalidConfigError(f"d={self.d} exceeds min(N_r, N_t)={min(n_r, n_t)}")


@dataclass(frozen=True)
class NoiseModel:
    """Complex AWGN at ``snr_db``; ``snr_db = inf`` means a noiseless link"""

    snr_db: float
    rng_seed: int = 0

    @property
    def noiseless(self) -> bool:
        return bool(np.isposinf(self.snr_db))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)
