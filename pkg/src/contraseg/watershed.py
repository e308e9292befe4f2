"""Marker-controlled watershed turning probability maps into instances.

Markers are connected components of (P_m > theta_m and P_b < theta_b)
surviving a minimum-size filter. Growth happens over the region
(P_m > theta_f) on the elevation field 1 - P_m via a priority flood:
lowest elevation first, ties broken by z-major linear index, so the result
is fully deterministic. Voxels outside the region stay background.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._validation import as_volume_array, check_same_shape
from .volume import Volume

_OFFSETS_6 = np.array([(-1, 0, 0), (1, 0, 0), (0, -1, 0),
                       (0, 1, 0), (0, 0, -1), (0, 0, 1)], dtype=np.int64)
_OFFSETS_26 = np.array([(dz, dy, dx)
                        for dz in (-1, 0, 1) for dy in (-1, 0, 1)
                        for dx in (-1, 0, 1) if (dz, dy, dx) != (0, 0, 0)],
                       dtype=np.int64)


@dataclass(frozen=True)
class WatershedParams:
    marker_threshold: float = 0.9      # theta_m on P_m
    boundary_threshold: float = 0.5    # theta_b on P_b
    foreground_threshold: float = 0.8  # theta_f, region of growth
    connectivity: int = 6
    min_size: int = 8

    def __post_init__(self):
        if not 0.0 < self.foreground_threshold <= self.marker_threshold <= 1.0:
            raise ValueError(
                f"need 0 < theta_f <= theta_m <= 1, got theta_f="
                f"{self.foreground_threshold}, theta_m={self.marker_threshold}")
        if not 0.0 <= self.boundary_threshold <= 1.0:
            raise ValueError(f"theta_b must be in [0, 1], got {self.boundary_threshold}")
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.min_size < 0:
            raise ValueError("min_size must be >= 0")


@dataclass
class InstanceSeg:
    """Instance labels 1..K plus a mean-probability score per instance."""

    labels: Volume
    scores: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.float64))

    @property
    def count(self) -> int:
        return len(self.scores)


def connected_components(mask, connectivity: int = 6) -> Volume:
    """Label connected foreground regions.

    Ids are assigned in ascending order of each component's minimum z-major
    linear index, starting at 1.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    arr = as_volume_array(mask, name="mask") != 0
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    raw, n = ndimage.label(arr, structure=structure)
    if n == 0:
        return Volume(np.zeros(arr.shape, dtype=np.uint32))
    # remap ids by first occurrence in z-major scan order
    flat = raw.ravel()
    nz = np.flatnonzero(flat)
    first_seen = flat[nz]
    _, first_idx = np.unique(first_seen, return_index=True)
    order = first_seen[np.sort(first_idx)]
    remap = np.zeros(n + 1, dtype=np.uint32)
    remap[order] = np.arange(1, n + 1, dtype=np.uint32)
    return Volume(remap[raw])


def marker_watershed(p_m, p_b, params: WatershedParams = WatershedParams()) -> InstanceSeg:
    """Grow instances from high-confidence markers over the foreground region."""
    pm = as_volume_array(p_m, dtype=np.float32, name="p_m")
    pb = as_volume_array(p_b, dtype=np.float32, name="p_b")
    dims = check_same_shape(pm, pb)

    marker_mask = (pm > params.marker_threshold) & (pb < params.boundary_threshold)
    markers = connected_components(marker_mask.astype(np.uint8),
                                   params.connectivity).data
    markers = _drop_small(markers, params.min_size)
    region = pm > params.foreground_threshold

    labels = _priority_flood(markers, region, 1.0 - pm, params.connectivity)
    return relabel_and_score(Volume(labels), pm, min_size=0)


def _drop_small(labels: np.ndarray, min_size: int) -> np.ndarray:
    if min_size <= 1 or labels.max() == 0:
        return labels
    ids, counts = np.unique(labels[labels != 0], return_counts=True)
    keep = ids[counts >= min_size]
    remap = np.zeros(int(labels.max()) + 1, dtype=np.uint32)
    remap[keep] = np.arange(1, len(keep) + 1, dtype=np.uint32)
    return remap[labels]


def _priority_flood(markers: np.ndarray, region: np.ndarray,
                    elevation: np.ndarray, connectivity: int) -> np.ndarray:
    """Expand marker labels across the region, lowest elevation first."""
    dims = markers.shape
    offsets = _OFFSETS_6 if connectivity == 6 else _OFFSETS_26
    labels = markers.astype(np.uint32).copy()
    labels[~region] = 0
    elev = elevation.astype(np.float64)
    heap: list[tuple[float, int, int]] = []

    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    seeds = np.argwhere(labels != 0)
    for zyx in seeds:
        z, y, x = (int(c) for c in zyx)
        lab = int(labels[z, y, x])
        for off in offsets:
            nz, ny, nx = z + int(off[0]), y + int(off[1]), x + int(off[2])
            if (0 <= nz < dims[0] and 0 <= ny < dims[1] and 0 <= nx < dims[2]
                    and region[nz, ny, nx] and labels[nz, ny, nx] == 0):
                lin = nz * strides[0] + ny * strides[1] + nx
                heapq.heappush(heap, (float(elev[nz, ny, nx]), int(lin), lab))

    while heap:
        _, lin, lab = heapq.heappop(heap)
        z, y, x = lin // strides[0], (lin // strides[1]) % dims[1], lin % dims[2]
        if labels[z, y, x] != 0:
            continue
        labels[z, y, x] = lab
        for off in offsets:
            nz, ny, nx = int(z + off[0]), int(y + off[1]), int(x + off[2])
            if (0 <= nz < dims[0] and 0 <= ny < dims[1] and 0 <= nx < dims[2]
                    and region[nz, ny, nx] and labels[nz, ny, nx] == 0):
                nlin = nz * strides[0] + ny * strides[1] + nx
                heapq.heappush(heap, (float(elev[nz, ny, nx]), int(nlin), lab))
    return labels


def relabel_and_score(labels: Volume | np.ndarray, p_m,
                      min_size: int = 0) -> InstanceSeg:
    """Drop instances below min_size, compact ids to 1..K and score them.

    The score of an instance is the mean mask probability over its voxels.
    """
    arr = as_volume_array(labels, name="labels").astype(np.uint32)
    pm = as_volume_array(p_m, dtype=np.float32, name="p_m")
    check_same_shape(arr, pm)
    if min_size > 1:
        arr = _drop_small(arr, min_size)
    ids = np.unique(arr[arr != 0])
    remap = np.zeros(int(arr.max()) + 1 if arr.size else 1, dtype=np.uint32)
    remap[ids] = np.arange(1, len(ids) + 1, dtype=np.uint32)
    compact = remap[arr]
    scores = np.array([float(pm[compact == k].mean())
                       for k in range(1, len(ids) + 1)], dtype=np.float64)
    return InstanceSeg(labels=Volume(compact), scores=scores)
