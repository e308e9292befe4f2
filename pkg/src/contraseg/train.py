"""Deterministic SGD training loop, tiled prediction, and evaluation.

Each step samples one patch, applies augmentation, runs the backbone,
computes the cross-entropy plus the two contrastive terms on selected
points, and updates parameters with SGD momentum. Everything downstream of
the seed is deterministic, so identical configs reproduce identical
checkpoints, logs, and reports.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .losses import (LossConfig, PointFeatures, DEFAULT_GAMMA,
                     build_consistency_pairs, consistency_loss,
                     cross_entropy_loss, similarity_loss, total_loss)
from .metrics import EvalReport, SizeBins, compile_report, instance_sizes, match_instances
from .points import partition_by_class, select_points
from .volume import Volume, binarize_instances, boundary_from_instances, load_volume, save_volume
from .watershed import WatershedParams, marker_watershed


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; carries a diagnostics path."""


@dataclass(frozen=True)
class TrainConfig:
    n_points: int = 1024
    beta: float = 0.75
    alpha: float = -4.0
    lambda1: float = 0.2
    lambda2: float = 0.2
    gamma: float = DEFAULT_GAMMA
    patch_size: tuple[int, int, int] = (8, 64, 64)   # paper-scale: (32, 256, 256)
    learning_rate: float = 0.05
    momentum: float = 0.9
    steps: int = 500
    warmup_steps: int = 0
    seed: int = 0
    augment_flips: bool = True
    augment_transpose: bool = True
    augment_intensity: bool = True
    boundary_thickness: int = 1
    consistency_sign: str = "as-written"
    point_oversample: int = 0
    checkpoint_interval: int = 0     # 0: final checkpoint only
    backbone: bb.BackboneConfig = field(default_factory=bb.BackboneConfig)
    watershed: WatershedParams = field(default_factory=WatershedParams)
    size_bins: SizeBins = field(default_factory=SizeBins)

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        self.backbone.check_dims(self.patch_size)

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, gamma=self.gamma,
                          lambda1=self.lambda1, lambda2=self.lambda2,
                          consistency_sign=self.consistency_sign)

    def to_dict(self) -> dict:
        return asdict(self)


def config_from_dict(obj: dict) -> TrainConfig:
    """Rebuild a TrainConfig (with nested sections) from plain JSON data."""
    kwargs = dict(obj)
    if "patch_size" in kwargs:
        kwargs["patch_size"] = tuple(kwargs["patch_size"])
    if "backbone" in kwargs and isinstance(kwargs["backbone"], dict):
        sub = dict(kwargs["backbone"])
        if "widths" in sub:
            sub["widths"] = tuple(sub["widths"])
        kwargs["backbone"] = bb.BackboneConfig(**sub)
    if "watershed" in kwargs and isinstance(kwargs["watershed"], dict):
        kwargs["watershed"] = WatershedParams(**kwargs["watershed"])
    if "size_bins" in kwargs and isinstance(kwargs["size_bins"], dict):
        kwargs["size_bins"] = SizeBins(**kwargs["size_bins"])
    return TrainConfig(**kwargs)


@dataclass
class StepRecord:
    step: int
    l_ce: float
    l_sim: float
    l_con: float
    l_total: float
    n_certain_fg: int
    n_uncertain_fg: int
    n_background: int
    n_pos_pairs: int
    n_neg_pairs: int


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.records])

    def save(self, path: str | os.PathLike) -> None:
        with open(os.fspath(path), "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


# -- data ------------------------------------------------------------------

def load_manifest(path: str | os.PathLike) -> list[dict]:
    """Resolve a dataset manifest into absolute volume base paths."""
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    base_dir = os.path.dirname(os.path.abspath(path))
    entries = manifest["volumes"] if isinstance(manifest, dict) else manifest
    out = []
    for entry in entries:
        rec = dict(entry)
        for key in ("image", "labels", "distractors"):
            if key in rec and rec[key] is not None:
                rec[key] = os.path.join(base_dir, rec[key])
        out.append(rec)
    return out


@dataclass(frozen=True)
class AugmentDecisions:
    flip_y: bool = False
    flip_x: bool = False
    transpose_xy: bool = False
    intensity: float = 1.0


def sample_augment(rng: np.random.Generator, cfg: TrainConfig) -> AugmentDecisions:
    flip_y = flip_x = transpose_xy = False
    intensity = 1.0
    if cfg.augment_flips:
        flip_y = bool(rng.random() < 0.5)
        flip_x = bool(rng.random() < 0.5)
    if cfg.augment_transpose:
        transpose_xy = bool(rng.random() < 0.5)
    if cfg.augment_intensity:
        intensity = float(rng.uniform(0.9, 1.1))
    return AugmentDecisions(flip_y, flip_x, transpose_xy, intensity)


def apply_augment(image: np.ndarray, labels: np.ndarray,
                  decisions: AugmentDecisions) -> tuple[np.ndarray, np.ndarray]:
    """Apply xy flips / transpose to image and labels, jitter to image only."""
    img, lab = image, labels
    if decisions.flip_y:
        img, lab = img[:, ::-1, :], lab[:, ::-1, :]
    if decisions.flip_x:
        img, lab = img[:, :, ::-1], lab[:, :, ::-1]
    if decisions.transpose_xy and img.shape[1] == img.shape[2]:
        img, lab = img.swapaxes(1, 2), lab.swapaxes(1, 2)
    if decisions.intensity != 1.0:
        img = np.clip(img * decisions.intensity, 0.0, 1.0)
    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(lab)


def augment(sample: tuple[np.ndarray, np.ndarray], rng: np.random.Generator,
            cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    image, labels = sample
    return apply_augment(image, labels, sample_augment(rng, cfg))


def _crop(arr: np.ndarray, offset, size) -> np.ndarray:
    z, y, x = offset
    d, h, w = size
    return arr[z:z + d, y:y + h, x:x + w]


# -- the loss for one patch -------------------------------------------------

@dataclass
class StepLosses:
    total: ad.Tensor
    ce_mean: ad.Tensor
    sim: ad.Tensor
    con: ad.Tensor
    partition_sizes: tuple[int, int, int]
    pair_counts: tuple[int, int]


def patch_losses(out: bb.BackboneOutput, mask: np.ndarray, boundary: np.ndarray,
                 cfg: TrainConfig, rng: np.random.Generator | None = None) -> StepLosses:
    """Full objective on one forward pass: Eq-style CE + contrastive terms."""
    loss_cfg = cfg.loss_config()
    dims = out.dims
    ce = cross_entropy_loss(out.p_m, mask, out.p_b, boundary, eps=loss_cfg.eps)

    pm_np = np.ascontiguousarray(out.p_m.data[0, 0])
    n_points = min(cfg.n_points, pm_np.size)
    pts = select_points(pm_np, mask, n_points, cfg.beta, rng=rng,
                        oversample_pool=cfg.point_oversample)
    part = partition_by_class(pts, mask)

    hybrid = ad.concat_channels(
        ad.trilinear_upsample(out.features,
                              (dims[0] // out.features.data.shape[2],
                               dims[1] // out.features.data.shape[3],
                               dims[2] // out.features.data.shape[4])),
        out.p_m)

    def feats(coords: np.ndarray) -> PointFeatures:
        if len(coords) == 0:
            return PointFeatures(coords, ad.constant(np.zeros((0, 1))))
        return PointFeatures(coords, ad.gather_points(hybrid, coords))

    l_sim = similarity_loss(feats(part.certain_fg), feats(part.uncertain_fg),
                            feats(part.background), dims, loss_cfg)

    pairs = build_consistency_pairs(pts, mask)
    l_con = consistency_loss(feats(pairs.positives[:, 0]), feats(pairs.positives[:, 1]),
                             feats(pairs.negatives[:, 0]), feats(pairs.negatives[:, 1]),
                             dims, loss_cfg)

    l_total = total_loss(ce.mean, l_sim, l_con, loss_cfg)
    return StepLosses(total=l_total, ce_mean=ce.mean, sim=l_sim, con=l_con,
                      partition_sizes=part.sizes, pair_counts=pairs.counts)


# -- training ---------------------------------------------------------------

def train(cfg: TrainConfig, manifest: list[dict] | str | os.PathLike,
          out_dir: str | os.PathLike | None = None,
          resume: str | os.PathLike | None = None
          ) -> tuple[dict[str, np.ndarray], TrainLog]:
    """Train from a dataset manifest; returns final parameters and the log.

    Checkpoints are written to ``out_dir`` (when given) every
    ``checkpoint_interval`` steps and at the end. A non-finite loss aborts
    with a diagnostic dump of the offending patch.
    """
    if isinstance(manifest, (str, os.PathLike)):
        manifest = load_manifest(manifest)
    if not manifest:
        raise ValueError("manifest lists no volumes")
    volumes = [(load_volume(rec["image"]).data, load_volume(rec["labels"]).data)
               for rec in manifest]
    patch = cfg.patch_size
    for i, (img, _) in enumerate(volumes):
        if any(s < p for s, p in zip(img.shape, patch)):
            raise ValueError(f"volume {i} dims {img.shape} smaller than "
                             f"patch {patch}")

    rng = np.random.default_rng(cfg.seed)
    if resume is not None:
        params, bcfg, _header = bb.load_checkpoint(resume)
        if bcfg != cfg.backbone:
            raise ValueError("resume checkpoint backbone config does not match")
    else:
        params = bb.init_params(cfg.backbone, cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    log = TrainLog()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for step in range(1, cfg.steps + 1):
        vol_idx = int(rng.integers(len(volumes)))
        image, labels = volumes[vol_idx]
        offset = tuple(int(rng.integers(s - p + 1))
                       for s, p in zip(image.shape, patch))
        img_patch = _crop(image, offset, patch)
        lab_patch = _crop(labels, offset, patch)
        img_patch, lab_patch = augment((img_patch, lab_patch), rng, cfg)
        mask = (lab_patch != 0).astype(np.uint8)
        boundary = boundary_from_instances(lab_patch, cfg.boundary_thickness).data

        tape = ad.Tape()
        tensors = bb.as_tensors(params, tape)
        out = bb.forward(img_patch, tensors, cfg.backbone, tape=tape)
        losses = patch_losses(out, mask, boundary, cfg, rng=rng)

        if not np.isfinite(losses.total.item()):
            raise _diverged(step, img_patch, mask, boundary, out_dir)
        tape.backward(losses.total)

        lr = cfg.learning_rate
        if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
            lr = cfg.learning_rate * step / cfg.warmup_steps
        for name, tensor in tensors.items():
            grad = tensor.grad
            if grad is None:
                continue
            velocity[name] = cfg.momentum * velocity[name] + grad
            params[name] = params[name] - lr * velocity[name]

        log.records.append(StepRecord(
            step=step, l_ce=losses.ce_mean.item(), l_sim=losses.sim.item(),
            l_con=losses.con.item(), l_total=losses.total.item(),
            n_certain_fg=losses.partition_sizes[0],
            n_uncertain_fg=losses.partition_sizes[1],
            n_background=losses.partition_sizes[2],
            n_pos_pairs=losses.pair_counts[0],
            n_neg_pairs=losses.pair_counts[1]))

        if (out_dir is not None and cfg.checkpoint_interval > 0
                and step % cfg.checkpoint_interval == 0):
            _save(out_dir, f"ckpt_{step:06d}", params, cfg, step)

    if out_dir is not None:
        _save(out_dir, "ckpt_final", params, cfg, cfg.steps)
        log.save(os.path.join(os.fspath(out_dir), "train_log.json"))
    return params, log


def _save(out_dir, name: str, params, cfg: TrainConfig, step: int) -> None:
    bb.save_checkpoint(os.path.join(os.fspath(out_dir), name), params,
                       cfg.backbone, cfg.seed, step,
                       extra={"train_config": cfg.to_dict()})


def _diverged(step: int, image, mask, boundary, out_dir) -> TrainingDivergedError:
    where = "no diagnostics directory configured"
    if out_dir is not None:
        diag = os.path.join(os.fspath(out_dir), f"diverged_step{step:06d}")
        os.makedirs(diag, exist_ok=True)
        save_volume(Volume(np.ascontiguousarray(image, dtype=np.float32)),
                    os.path.join(diag, "image"))
        save_volume(Volume(mask.astype(np.uint8)), os.path.join(diag, "mask"))
        save_volume(Volume(boundary.astype(np.uint8)), os.path.join(diag, "boundary"))
        where = f"offending batch dumped to {diag}"
    return TrainingDivergedError(f"non-finite loss at step {step}; {where}")


def load_train_checkpoint(path) -> tuple[dict[str, np.ndarray], TrainConfig]:
    params, _bcfg, header = bb.load_checkpoint(path)
    extra = header.get("extra", {})
    if "train_config" not in extra:
        raise ValueError(f"checkpoint at {path!r} carries no train config")
    return params, config_from_dict(extra["train_config"])


# -- inference and evaluation ------------------------------------------------

def _tile_offsets(full: int, window: int) -> list[int]:
    if full == window:
        return [0]
    offs = list(range(0, full - window + 1, window))
    if offs[-1] != full - window:
        offs.append(full - window)
    return offs


def predict(params: dict[str, np.ndarray], image, cfg: TrainConfig
            ) -> tuple[Volume, Volume]:
    """Full-volume probability maps; larger inputs are tiled with
    overlap-averaging."""
    arr = image.data if isinstance(image, Volume) else np.asarray(image, np.float32)
    patch = cfg.patch_size
    if any(s < p for s, p in zip(arr.shape, patch)):
        raise ValueError(f"image dims {arr.shape} smaller than patch {patch}")
    if arr.shape == tuple(patch):
        out = bb.forward(arr, params, cfg.backbone)
        return out.mask_volume(), out.boundary_volume()
    acc_m = np.zeros(arr.shape, dtype=np.float64)
    acc_b = np.zeros(arr.shape, dtype=np.float64)
    weight = np.zeros(arr.shape, dtype=np.float64)
    for z in _tile_offsets(arr.shape[0], patch[0]):
        for y in _tile_offsets(arr.shape[1], patch[1]):
            for x in _tile_offsets(arr.shape[2], patch[2]):
                tile = _crop(arr, (z, y, x), patch)
                out = bb.forward(tile, params, cfg.backbone)
                sl = (slice(z, z + patch[0]), slice(y, y + patch[1]),
                      slice(x, x + patch[2]))
                acc_m[sl] += out.p_m.data[0, 0]
                acc_b[sl] += out.p_b.data[0, 0]
                weight[sl] += 1.0
    p_m = (acc_m / weight).astype(np.float32)
    p_b = (acc_b / weight).astype(np.float32)
    return Volume(p_m), Volume(p_b)


def evaluate_maps(prob_pairs: list[tuple[np.ndarray, np.ndarray]],
                  gt_labels: list[np.ndarray], ws: WatershedParams,
                  bins: SizeBins) -> EvalReport:
    """Watershed each probability pair and score against ground truth.

    Voxel counts pool across volumes for the Jaccard; match records and
    ground-truth sizes pool for the AP.
    """
    tp = fp = fn = 0
    records: list[dict] = []
    gt_sizes: list[int] = []
    for (pm, pb), gt in zip(prob_pairs, gt_labels):
        seg = marker_watershed(pm, pb, ws)
        pred_fg = seg.labels.data != 0
        gt_fg = gt != 0
        tp += int(np.count_nonzero(pred_fg & gt_fg))
        fp += int(np.count_nonzero(pred_fg & ~gt_fg))
        fn += int(np.count_nonzero(~pred_fg & gt_fg))
        records.extend(match_instances(seg, gt))
        gt_sizes.extend(instance_sizes(gt.astype(np.int64)).values())
    jac = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    return compile_report(records, gt_sizes, bins, jac)


def evaluate(params: dict[str, np.ndarray], manifest: list[dict] | str | os.PathLike,
             cfg: TrainConfig, ws: WatershedParams | None = None,
             bins: SizeBins | None = None) -> EvalReport:
    """predict -> watershed -> metrics over every manifest volume."""
    if isinstance(manifest, (str, os.PathLike)):
        manifest = load_manifest(manifest)
    ws = cfg.watershed if ws is None else ws
    bins = cfg.size_bins if bins is None else bins
    prob_pairs = []
    gts = []
    for rec in manifest:
        image = load_volume(rec["image"])
        gts.append(load_volume(rec["labels"]).data)
        pm, pb = predict(params, image, cfg)
        prob_pairs.append((pm.data, pb.data))
    return evaluate_maps(prob_pairs, gts, ws, bins)
