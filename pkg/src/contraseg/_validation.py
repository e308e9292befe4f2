"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np

from .volume import Volume


def as_volume_array(x, dtype=None, name: str = "volume") -> np.ndarray:
    """Return the underlying (D, H, W) array of a Volume or array-like."""
    arr = x.data if isinstance(x, Volume) else np.asarray(x)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be 3-dimensional, got shape {arr.shape}")
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return arr


def check_same_shape(*arrays: np.ndarray) -> tuple[int, int, int]:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")
    return arrays[0].shape  # type: ignore[return-value]


def check_points_in_bounds(points: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Validate integer (z, y, x) point coordinates against volume dims."""
    pts = np.asarray(points, dtype=np.int64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
    lo = pts < 0
    hi = pts >= np.asarray(dims)
    if lo.any() or hi.any():
        bad = pts[(lo | hi).any(axis=1)][0]
        raise IndexError(f"point {tuple(int(c) for c in bad)} outside dims {dims}")
    return pts
