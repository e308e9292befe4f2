"""Synthetic labeled volumes with mitochondria-like instances and hard
distractors.

Instances are z-elongated ellipsoids with a dark membrane rim and a
textured interior over a brighter background. Distractors are smaller,
rounder bodies rendered with the same membrane and texture statistics but
carrying label 0: they exist purely to produce hard examples. Everything
is deterministic in the configured seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace, asdict

import numpy as np
from scipy import ndimage

from .volume import Volume, boundary_from_instances, save_volume

BACKGROUND_LEVEL = 0.78
INTERIOR_LEVEL = 0.45
PLACEMENT_RETRIES = 25


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int, int] = (16, 64, 64)
    instance_count: tuple[int, int] = (3, 6)
    semi_axes_xy: tuple[float, float] = (4.0, 9.0)
    z_elongation: tuple[float, float] = (1.2, 2.0)
    distractor_count: tuple[int, int] = (2, 5)
    texture_contrast: float = 0.5
    membrane_darkness: float = 0.85
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        d, h, w = self.dims
        if d < 4 or h < 16 or w < 16:
            raise ValueError(f"dims must be at least (4, 16, 16), got {self.dims}")
        for name in ("instance_count", "semi_axes_xy", "z_elongation",
                     "distractor_count"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty")
        if not 0.0 <= self.texture_contrast <= 1.0:
            raise ValueError("texture_contrast must be in [0, 1]")
        if not 0.0 <= self.membrane_darkness <= 1.0:
            raise ValueError("membrane_darkness must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _ellipsoid_mask(dims, center, semi, angle) -> np.ndarray:
    """Voxels inside an xy-rotated ellipsoid; semi = (az, ay, ax)."""
    d, h, w = dims
    z, y, x = np.ogrid[:d, :h, :w]
    cz, cy, cx = center
    ca, sa = np.cos(angle), np.sin(angle)
    yy = y - cy
    xx = x - cx
    yr = ca * yy + sa * xx
    xr = -sa * yy + ca * xx
    zz = (z - cz) / semi[0]
    return (zz * zz + (yr / semi[1]) ** 2 + (xr / semi[2]) ** 2) <= 1.0


def _place_bodies(rng, dims, count, semi_xy, elong, occupied) -> list[np.ndarray]:
    """Sample non-overlapping, 6-connected ellipsoids; skips failed retries."""
    placed = []
    six = ndimage.generate_binary_structure(3, 1)
    for _ in range(count):
        for _attempt in range(PLACEMENT_RETRIES):
            ay = rng.uniform(*semi_xy)
            ax = rng.uniform(*semi_xy)
            az = rng.uniform(*elong) * min(ay, ax)
            az = min(az, dims[0] / 2 - 1)
            az = max(az, 1.2)
            margin = (az + 1, max(ay, ax) + 1, max(ay, ax) + 1)
            if any(2 * m >= s for m, s in zip(margin, dims)):
                continue
            center = tuple(rng.uniform(m, s - m) for m, s in zip(margin, dims))
            angle = rng.uniform(0, np.pi)
            body = _ellipsoid_mask(dims, center, (az, ay, ax), angle)
            if not body.any():
                continue
            # keep a 1-voxel gap so instances stay resolvable
            grown = ndimage.binary_dilation(body, structure=six)
            if (grown & occupied).any():
                continue
            _, n_comp = ndimage.label(body, structure=six)
            if n_comp != 1:
                continue
            occupied |= body
            placed.append(body)
            break
    return placed


def _smooth_noise(rng, dims) -> np.ndarray:
    """Zero-centered low-frequency field scaled to [-0.5, 0.5]."""
    raw = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=(0.8, 1.6, 1.6))
    peak = max(float(np.abs(raw).max()), 1e-9)
    return raw / (2.0 * peak)


def generate_volume(cfg: SynthConfig) -> tuple[Volume, Volume, Volume]:
    """One (image, instances, distractor_mask) triple, deterministic in seed."""
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.dims
    occupied = np.zeros(dims, dtype=bool)

    n_inst = int(rng.integers(cfg.instance_count[0], cfg.instance_count[1] + 1))
    bodies = _place_bodies(rng, dims, n_inst, cfg.semi_axes_xy,
                           cfg.z_elongation, occupied)
    labels = np.zeros(dims, dtype=np.uint32)
    for i, body in enumerate(bodies, start=1):
        labels[body] = i

    n_dist = int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1))
    lo, hi = cfg.semi_axes_xy
    dist_axes = (max(1.6, 0.4 * lo), max(2.0, 0.55 * hi))
    dist_bodies = _place_bodies(rng, dims, n_dist, dist_axes, (0.9, 1.1), occupied)
    distractors = np.zeros(dims, dtype=np.uint8)
    for body in dist_bodies:
        distractors[body] = 1

    # shared appearance labels so every body gets its own membrane rim
    appearance = labels.copy()
    next_id = len(bodies) + 1
    for body in dist_bodies:
        appearance[body] = next_id
        next_id += 1

    image = np.full(dims, BACKGROUND_LEVEL, dtype=np.float64)
    fg = appearance != 0
    if fg.any():
        rim = boundary_from_instances(appearance, thickness=1).data.astype(bool)
        interior = fg & ~rim
        texture = _smooth_noise(rng, dims)
        image[interior] = (INTERIOR_LEVEL
                           + 0.4 * cfg.texture_contrast * texture[interior])
        image[rim] = BACKGROUND_LEVEL * (1.0 - cfg.membrane_darkness)
    if cfg.noise_sigma > 0:
        image += rng.normal(0.0, cfg.noise_sigma, size=dims)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return (Volume(image), Volume(labels), Volume(distractors))


def _volume_seed(base_seed: int, index: int) -> int:
    """Independent per-volume stream keyed by (seed, index)."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(cfg: SynthConfig, count: int, out_dir: str | os.PathLike) -> dict:
    """Write `count` volume triples plus a manifest.

    The manifest lists relative paths and the per-volume seed, so any entry
    can be regenerated independently with ``replace(cfg, seed=entry_seed)``.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(count):
        seed_i = _volume_seed(cfg.seed, i)
        image, labels, distractors = generate_volume(replace(cfg, seed=seed_i))
        names = {}
        for kind, vol in (("image", image), ("labels", labels),
                          ("distractors", distractors)):
            base = f"vol{i:04d}_{kind}"
            save_volume(vol, os.path.join(out_dir, base))
            names[kind] = base
        entries.append({**names, "seed": seed_i})
    manifest = {"config": asdict(cfg), "count": count, "volumes": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest
