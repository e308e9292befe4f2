"""Small 3D encoder-decoder with mask and boundary heads.

The network pools in xy only (z untouched by default), mirrors the encoder
with trilinear upsampling, and exposes two probability maps at full
resolution plus a penultimate feature map at half resolution in H and W::

    image (D, H, W) -> P_m (D, H, W), P_b (D, H, W), F (C, D, H/2, W/2)

Point feature vectors are built by upsampling F back to full resolution and
appending the mask probability at the point, giving C+1 components.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from ._validation import as_volume_array, check_points_in_bounds
from .volume import Volume


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (8, 16, 32)   # encoder channels, shallow to deep
    levels: int = 3
    feature_channels: int = 16
    pool_xy_only: bool = True

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"need at least 2 levels, got {self.levels}")
        if len(self.widths) != self.levels:
            raise ValueError(f"widths {self.widths} must list one channel count "
                             f"per level ({self.levels})")
        if any(a >= b for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"widths must be strictly increasing, got {self.widths}")
        if self.feature_channels < 1:
            raise ValueError("feature_channels must be >= 1")

    @property
    def pool_factor(self) -> tuple[int, int, int]:
        return (1, 2, 2) if self.pool_xy_only else (2, 2, 2)

    def required_divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def check_dims(self, dims: tuple[int, int, int]) -> None:
        d, h, w = dims
        q = self.required_divisor()
        if h % q or w % q:
            raise ValueError(f"H and W must be divisible by {q} "
                             f"(levels={self.levels}), got H={h}, W={w}")
        if not self.pool_xy_only and d % q:
            raise ValueError(f"D must be divisible by {q} when pooling in z, got D={d}")
        if d < 4:
            raise ValueError(f"D must be >= 4, got D={d}")


@dataclass
class BackboneOutput:
    """Graph tensors for one forward pass; P_m/P_b are (1,1,D,H,W), F is
    (1,C,D,H/2,W/2). Use the volume accessors for detached containers."""

    p_m: ad.Tensor
    p_b: ad.Tensor
    features: ad.Tensor

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.p_m.data.shape[2:]  # type: ignore[return-value]

    def mask_volume(self) -> Volume:
        return Volume(np.ascontiguousarray(self.p_m.data[0, 0], dtype=np.float32))

    def boundary_volume(self) -> Volume:
        return Volume(np.ascontiguousarray(self.p_b.data[0, 0], dtype=np.float32))


def _conv_shapes(cfg: BackboneConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter declaration order; the checkpoint blob follows it exactly."""
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def block(name: str, cin: int, cout: int) -> None:
        shapes.append((f"{name}.conv1.w", (cout, cin, 3, 3, 3)))
        shapes.append((f"{name}.conv1.b", (cout,)))
        shapes.append((f"{name}.conv2.w", (cout, cout, 3, 3, 3)))
        shapes.append((f"{name}.conv2.b", (cout,)))

    cin = 1
    for i, width in enumerate(cfg.widths):
        block(f"enc{i}", cin, width)
        cin = width
    prev = cfg.widths[-1]
    for i in range(cfg.levels - 2, 0, -1):
        block(f"dec{i}", prev + cfg.widths[i], cfg.widths[i])
        prev = cfg.widths[i]
    shapes.append(("feat.w", (cfg.feature_channels, prev, 3, 3, 3)))
    shapes.append(("feat.b", (cfg.feature_channels,)))
    block("dec0", cfg.feature_channels + cfg.widths[0], cfg.widths[0])
    shapes.append(("head_m.w", (1, cfg.widths[0], 1, 1, 1)))
    shapes.append(("head_m.b", (1,)))
    shapes.append(("head_b.w", (1, cfg.widths[0], 1, 1, 1)))
    shapes.append(("head_b.b", (1,)))
    return shapes


def init_params(cfg: BackboneConfig, seed: int) -> dict[str, np.ndarray]:
    """He-style fan-in scaled initialization, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _conv_shapes(cfg):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            scale = np.sqrt(2.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return params


def as_tensors(params: dict[str, np.ndarray], tape: ad.Tape,
               trainable: bool = True) -> dict[str, ad.Tensor]:
    """Bind a parameter dict to a tape as leaf tensors."""
    return {k: tape.leaf(v, requires_grad=trainable) for k, v in params.items()}


def _block(x: ad.Tensor, p: dict[str, ad.Tensor], name: str) -> ad.Tensor:
    x = ad.relu(ad.conv3d(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], 1, 1))
    x = ad.relu(ad.conv3d(x, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], 1, 1))
    return x


def forward(image: Volume | np.ndarray, params: dict[str, np.ndarray] | dict[str, ad.Tensor],
            cfg: BackboneConfig = BackboneConfig(), tape: ad.Tape | None = None,
            trainable: bool = False) -> BackboneOutput:
    """Run the network; returns sigmoid probability maps and the feature map.

    When ``tape`` is given the whole pass is recorded for backprop;
    ``trainable`` controls whether parameters receive gradients.
    """
    arr = as_volume_array(image, dtype=np.float32, name="image")
    cfg.check_dims(arr.shape)  # type: ignore[arg-type]
    if isinstance(next(iter(params.values())), ad.Tensor):
        p = params  # type: ignore[assignment]
        tape = next(iter(p.values())).tape if tape is None else tape
    else:
        if tape is None:
            tape = ad.Tape()
        p = as_tensors(params, tape, trainable)  # type: ignore[arg-type]

    x = tape.leaf(arr[None, None], requires_grad=False)
    skips = []
    for i in range(cfg.levels):
        x = _block(x, p, f"enc{i}")
        if i < cfg.levels - 1:
            skips.append(x)
            x = ad.maxpool3d(x, cfg.pool_factor)
    for i in range(cfg.levels - 2, 0, -1):
        x = ad.trilinear_upsample(x, cfg.pool_factor)
        x = ad.concat_channels(x, skips[i])
        x = _block(x, p, f"dec{i}")
    feats = ad.relu(ad.conv3d(x, p["feat.w"], p["feat.b"], 1, 1))
    x = ad.trilinear_upsample(feats, cfg.pool_factor)
    x = ad.concat_channels(x, skips[0])
    x = _block(x, p, "dec0")
    p_m = ad.sigmoid(ad.conv3d(x, p["head_m.w"], p["head_m.b"], 1, 0))
    p_b = ad.sigmoid(ad.conv3d(x, p["head_b.w"], p["head_b.b"], 1, 0))
    return BackboneOutput(p_m=p_m, p_b=p_b, features=feats)


def hybrid_point_features(out: BackboneOutput, points) -> ad.Tensor:
    """Per-point feature vectors of length C+1.

    Upsamples the half-resolution feature map to the full grid, gathers the
    channel fiber at each (z, y, x) point, and appends the mask probability
    at that voxel; differentiable end to end.
    """
    dims = out.dims
    pts = check_points_in_bounds(np.asarray(points).reshape(-1, 3), dims)
    fz = dims[0] // out.features.data.shape[2]
    fy = dims[1] // out.features.data.shape[3]
    fx = dims[2] // out.features.data.shape[4]
    full = ad.trilinear_upsample(out.features, (fz, fy, fx))
    hybrid = ad.concat_channels(full, out.p_m)
    return ad.gather_points(hybrid, pts)


def save_checkpoint(path: str | os.PathLike, params: dict[str, np.ndarray],
                    cfg: BackboneConfig, seed: int, step: int,
                    extra: dict | None = None) -> None:
    """Header JSON plus raw float32 blob, little-endian, in declaration order."""
    path = os.fspath(path)
    names = [n for n, _ in _conv_shapes(cfg)]
    header = {"config": asdict(cfg), "seed": seed, "step": step,
              "params": names}
    if extra:
        header["extra"] = extra
    blob = b"".join(np.ascontiguousarray(params[n], dtype="<f4").tobytes()
                    for n in names)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(header, fh)
    with open(path + ".raw", "wb") as fh:
        fh.write(blob)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray],
                                                      BackboneConfig, dict]:
    path = os.fspath(path)
    with open(path + ".json", "r", encoding="utf-8") as fh:
        header = json.load(fh)
    cfg_dict = dict(header["config"])
    cfg_dict["widths"] = tuple(cfg_dict["widths"])
    cfg = BackboneConfig(**cfg_dict)
    shapes = dict(_conv_shapes(cfg))
    if list(shapes) != list(header["params"]):
        raise ValueError(f"checkpoint at {path!r} does not match its config")
    with open(path + ".raw", "rb") as fh:
        blob = fh.read()
    params: dict[str, np.ndarray] = {}
    offset = 0
    for name in header["params"]:
        shape = shapes[name]
        count = int(np.prod(shape))
        chunk = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        params[name] = chunk.astype(np.float32).reshape(shape)
        offset += count * 4
    if offset != len(blob):
        raise ValueError(f"checkpoint blob at {path!r} has trailing bytes")
    return params, cfg, header
