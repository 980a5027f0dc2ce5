"""
CSIF1 trace files

Layout: 24-byte little-endian header (magic "CSIF", version u16 = 1, T u32,
N_r u16, N_t u16, sample_interval_ms f32, 6 reserved bytes) followed by
T * N_r * N_t float32 (real, imag) pairs, row-major over (t, r, c).
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import CsiFormatError
from ..models import ChannelTrace, ModelTag

logger = logging.getLogger(__name__)

MAGIC = b"CSIF"
VERSION = 1
HEADER = struct.Struct("<4sHIHHf6x")


def save_csi(trace: ChannelTrace, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = HEADER.pack(MAGIC, VERSION, len(trace), trace.n_r, trace.n_t, trace.sample_interval_ms)
    payload = np.ascontiguousarray(trace.h, dtype="<c8").tobytes()
    path.write_bytes(header + payload)
    logger.debug("wrote %d realizations to %s", len(trace), path)
    return path


def load_csi(path: Union[str, Path]) -> ChannelTrace:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise CsiFormatError(
            f"truncated header at byte offset 0: expected {HEADER.size} bytes, got {len(raw)}"
        )
    magic, version, n_time, n_r, n_t, interval = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CsiFormatError(f"bad magic at byte offset 0: expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise CsiFormatError(f"unsupported version at byte offset 4: expected {VERSION}, got {version}")
    expected = n_time * n_r * n_t * 8
    actual = len(raw) - HEADER.size
    if actual != expected:
        raise CsiFormatError(
            f"payload length mismatch at byte offset {HEADER.size}: expected {expected} bytes, got {actual}"
        )
    h = np.frombuffer(raw, dtype="<c8", offset=HEADER.size).reshape(n_time, n_r, n_t)
    return ChannelTrace(
        h=h.astype(np.complex128),
        t_index=np.arange(n_time),
        sample_interval_ms=float(interval),
        model_tag=ModelTag.FROM_FILE,
    )
