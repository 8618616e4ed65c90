"""Counter-based random numbers keyed by ``(seed, path, step, lane)``.

Every draw is a pure function of its key, so a path's noise does not depend
on how paths are batched or scheduled across threads.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

__all__ = ["uniforms", "normals"]

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_K_PATH = np.uint64(0xD1B54A32D192ED03)
_K_STEP = np.uint64(0xABC98388FB8FAC03)
_K_LANE = np.uint64(0x8CB92BA72F3D8DD7)
_S1, _S2, _S3 = np.uint64(30), np.uint64(27), np.uint64(31)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer
    z = (z ^ (z >> _S1)) * _C1
    z = (z ^ (z >> _S2)) * _C2
    return z ^ (z >> _S3)


def _bits(seed: int, path, step, lane: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        key = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLDEN
        z = (
            _mix(np.asarray(path, dtype=np.uint64) * _K_PATH + key)
            + np.asarray(step, dtype=np.uint64) * _K_STEP
            + np.uint64(lane) * _K_LANE
        )
        return _mix(_mix(z))


def uniforms(seed: int, path, step, lane: int = 0) -> np.ndarray:
    """Uniforms on the open interval (0, 1), 53-bit resolution."""
    b = _bits(seed, path, step, lane) >> np.uint64(11)
    return (b.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def normals(seed: int, path, step, lane: int = 0) -> np.ndarray:
    """Standard normals by inversion of :func:`uniforms`."""
    return ndtri(uniforms(seed, path, step, lane))
