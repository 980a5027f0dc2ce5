"""
Complex CSI traces <-> real, normalized, patched tensors
"""

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidConfigError, InvalidInputError, ShapeError
from ..models import ChannelTrace, ModelTag

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CsiTensorReal:
    """Real view of a trace: data [T, N_r, N_t, 2], last axis = (real, imag)"""

    data: np.ndarray
    sample_interval_ms: float = 1.0

    @property
    def meta(self):
        return self.data.shape[1], self.data.shape[2], self.sample_interval_ms


@dataclass(frozen=True)
class NormStats:
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidConfigError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True, eq=False)
class PatchSet:
    """
    patches: [2*N_r*N_t, N_patch, L_patch], one row per (r, c, component)
    """

    patches: np.ndarray
    stride: int
    stats: NormStats

    @property
    def l_patch(self) -> int:
        return self.patches.shape[2]

    @property
    def n_patch(self) -> int:
        return self.patches.shape[1]


def complex_to_real(trace: ChannelTrace) -> CsiTensorReal:
    if len(trace) == 0:
        raise InvalidInputError("cannot convert an empty trace")
    data = np.stack([trace.h.real, trace.h.imag], axis=-1)
    return CsiTensorReal(data=data, sample_interval_ms=trace.sample_interval_ms)


def real_to_complex(t: CsiTensorReal, model_tag: ModelTag = ModelTag.FROM_FILE) -> ChannelTrace:
    h = t.data[..., 0] + 1j * t.data[..., 1]
    return ChannelTrace(
        h=h,
        t_index=np.arange(h.shape[0]),
        sample_interval_ms=t.sample_interval_ms,
        model_tag=model_tag,
    )


def normalize(t: CsiTensorReal):
    """
    Global standardization with the population std

    A constant tensor maps to zeros with stats (mu, 1) so denormalize stays exact.
    """
    if t.data.size < 2:
        raise InvalidInputError("normalization needs at least two entries")
    mu = float(np.mean(t.data))
    sigma = float(np.std(t.data))
    if sigma == 0.0:
        logger.warning("constant CSI tensor, normalizing to zeros")
        return CsiTensorReal(np.zeros_like(t.data), t.sample_interval_ms), NormStats(mu, 1.0)
    return CsiTensorReal((t.data - mu) / sigma, t.sample_interval_ms), NormStats(mu, sigma)


def denormalize(t: CsiTensorReal, stats: NormStats) -> CsiTensorReal:
    return CsiTensorReal(t.data * stats.sigma + stats.mu, t.sample_interval_ms)


def flatten_rows(t: CsiTensorReal) -> np.ndarray:
    """[T, N_r, N_t, 2] -> [2*N_r*N_t, T], rows ordered (r, c, component)"""
    n_time = t.data.shape[0]
    return t.data.transpose(1, 2, 3, 0).reshape(-1, n_time)


def patch(t: CsiTensorReal, l_patch: int, stride: int, stats: NormStats = NormStats()) -> PatchSet:
    """
    Sliding-window patches per antenna-component row

    N_patch = floor((T - l_patch) / stride) + 1; windows may overlap.
    """
    if l_patch < 1 or stride < 1:
        raise InvalidConfigError(f"l_patch and stride must be >= 1, got {l_patch}, {stride}")
    n_time = t.data.shape[0]
    if l_patch > n_time:
        raise InvalidConfigError(f"l_patch={l_patch} is longer than the series (T={n_time})")
    rows = flatten_rows(t)
    windows = sliding_window_view(rows, l_patch, axis=1)[:, ::stride]
    return PatchSet(patches=np.ascontiguousarray(windows), stride=stride, stats=stats)


def to_csi(
    flat: np.ndarray,
    t_pre: int,
    n_r: int,
    n_t: int,
    stats: NormStats,
    sample_interval_ms: float = 1.0,
    model_tag: ModelTag = ModelTag.FROM_FILE,
) -> ChannelTrace:
    """
    Map prediction-head output back to a complex trace

    ``flat`` holds t_pre * n_r * n_t * 2 values laid out like ``flatten_rows``
    (rows (r, c, component), columns time); it is denormalized with ``stats``.
    """
    flat = np.asarray(flat, dtype=np.float64)
    expected = t_pre * n_r * n_t * 2
    if flat.size != expected:
        raise ShapeError(f"prediction has {flat.size} values, expected {expected}")
    data = flat.reshape(n_r, n_t, 2, t_pre).transpose(3, 0, 1, 2)
    real = denormalize(CsiTensorReal(data, sample_interval_ms), stats)
    return real_to_complex(real, model_tag=model_tag)
