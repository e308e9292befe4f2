"""Point selection: pick N representative voxels and split them by class.

Uncertain points are the top floor(beta*N) voxels by prediction error
|P_m - M|; certain points are the top N - floor(beta*N) voxels by mask
probability among the remainder. Ties break by ascending z-major linear
index, so selection is fully deterministic. An optional PointRend-style
random candidate pool can be enabled for experimentation; it is the only
consumer of the rng argument.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_volume_array, check_same_shape
from .volume import Volume


@dataclass(frozen=True)
class PointSet:
    """Sampled coordinates, (n, 3) int arrays of (z, y, x)."""

    uncertain: np.ndarray
    certain: np.ndarray

    @property
    def size(self) -> int:
        return len(self.uncertain) + len(self.certain)

    def all_points(self) -> np.ndarray:
        return np.concatenate([self.uncertain, self.certain], axis=0)


@dataclass(frozen=True)
class ClassPartition:
    """Disjoint split of a PointSet: certain-foreground, uncertain-foreground
    and background."""

    certain_fg: np.ndarray
    uncertain_fg: np.ndarray
    background: np.ndarray

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (len(self.certain_fg), len(self.uncertain_fg), len(self.background))


def prediction_error(p_m: Volume | np.ndarray, mask: Volume | np.ndarray) -> np.ndarray:
    """Elementwise |P_m - M|, in [0, 1]."""
    p = as_volume_array(p_m, dtype=np.float32, name="p_m")
    m = as_volume_array(mask, name="mask")
    check_same_shape(p, m)
    return np.abs(p - m.astype(np.float32))


def _top_k(key: np.ndarray, k: int, exclude: np.ndarray | None = None) -> np.ndarray:
    """Indices of the k largest key values; ties by ascending linear index."""
    flat = key.ravel()
    if exclude is not None and len(exclude):
        flat = flat.copy()
        flat[exclude] = -np.inf
    if k == 0:
        return np.empty(0, dtype=np.int64)
    # stable sort on -key keeps ascending index order within ties
    order = np.argsort(-flat, kind="stable")
    return order[:k]


def select_points(p_m: Volume | np.ndarray, mask: Volume | np.ndarray,
                  n_points: int, beta: float,
                  rng: np.random.Generator | None = None,
                  oversample_pool: int = 0) -> PointSet:
    """Pick n_points voxels: floor(beta*n) uncertain plus the rest certain.

    With ``oversample_pool`` > 1, candidates are first drawn uniformly at
    random (pool_factor * count of them) and the top-k is taken within the
    pool; the default of 0 disables the pool and no rng is consumed.
    """
    p = as_volume_array(p_m, dtype=np.float32, name="p_m")
    m = as_volume_array(mask, name="mask")
    dims = check_same_shape(p, m)
    total = p.size
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if n_points > total:
        raise ValueError(f"n_points={n_points} exceeds voxel count {total}")
    if n_points < 0:
        raise ValueError(f"n_points must be >= 0, got {n_points}")
    n_unc = int(np.floor(beta * n_points))
    n_cert = n_points - n_unc

    error = np.abs(p - m.astype(np.float32))
    if oversample_pool > 1:
        if rng is None:
            raise ValueError("oversample_pool requires an rng")
        pool = min(total, oversample_pool * n_points)
        cand = rng.choice(total, size=pool, replace=False)
        masked_err = np.full(total, -np.inf, dtype=np.float32)
        masked_err[cand] = error.ravel()[cand]
        unc_idx = _top_k(masked_err.reshape(dims), n_unc)
        masked_pm = np.full(total, -np.inf, dtype=np.float32)
        masked_pm[cand] = p.ravel()[cand]
        cert_idx = _top_k(masked_pm.reshape(dims), n_cert, exclude=unc_idx)
    else:
        unc_idx = _top_k(error, n_unc)
        cert_idx = _top_k(p, n_cert, exclude=unc_idx)

    def unravel(idx: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(idx, dims), axis=1).astype(np.int64)

    return PointSet(uncertain=unravel(unc_idx), certain=unravel(cert_idx))


def partition_by_class(points: PointSet, mask: Volume | np.ndarray) -> ClassPartition:
    """Certain foreground, uncertain foreground, and everything else."""
    m = as_volume_array(mask, name="mask")

    def labels_of(pts: np.ndarray) -> np.ndarray:
        if len(pts) == 0:
            return np.empty(0, dtype=bool)
        return m[pts[:, 0], pts[:, 1], pts[:, 2]] != 0

    cert_fg = labels_of(points.certain)
    unc_fg = labels_of(points.uncertain)
    empty = np.empty((0, 3), dtype=np.int64)
    cf = points.certain[cert_fg] if len(points.certain) else empty
    uf = points.uncertain[unc_fg] if len(points.uncertain) else empty
    bg_parts = []
    if len(points.certain):
        bg_parts.append(points.certain[~cert_fg])
    if len(points.uncertain):
        bg_parts.append(points.uncertain[~unc_fg])
    bg = np.concatenate(bg_parts, axis=0) if bg_parts else empty
    return ClassPartition(certain_fg=cf, uncertain_fg=uf, background=bg)
