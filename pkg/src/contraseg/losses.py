"""Training objective: cross-entropy plus two contrastive terms.

The similarity term pulls certain-foreground point features toward
uncertain-foreground features and away from background features, weighted
by z-distance. The consistency term contrasts same-position point pairs in
adjacent z-frames. Both operate on hybrid point feature vectors and are
differentiable through the graph.

All point sets are sorted by z-major linear index before any summation so
loss values are bit-stable under reordering of the input point lists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._validation import as_volume_array, check_same_shape
from .points import PointSet

DEFAULT_GAMMA = math.log(1.0 + math.e ** 2)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = -4.0            # z-distance weight exponent
    gamma: float = DEFAULT_GAMMA   # offset keeping the similarity term positive
    lambda1: float = 0.2           # similarity term weight
    lambda2: float = 0.2           # consistency term weight
    consistency_sign: str = "as-written"   # or "goal-consistent"
    eps: float = 1e-7

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.consistency_sign not in ("as-written", "goal-consistent"):
            raise ValueError(f"unknown consistency_sign {self.consistency_sign!r}")


@dataclass
class PointFeatures:
    """Feature rows aligned with integer (z, y, x) coordinates."""

    coords: np.ndarray      # (n, 3)
    features: ad.Tensor     # (n, d)

    def __len__(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class PairSets:
    """Adjacent-frame point pairs; each partner sits at (z-1, y, x)."""

    positives: np.ndarray   # (k, 2, 3) of (anchor, partner)
    negatives: np.ndarray

    @property
    def counts(self) -> tuple[int, int]:
        return (len(self.positives), len(self.negatives))


def _zmajor_order(coords: np.ndarray, dims) -> np.ndarray:
    d, h, w = dims
    lin = (coords[:, 0] * h + coords[:, 1]) * w + coords[:, 2]
    return np.argsort(lin, kind="stable")


def _sorted_features(pf: PointFeatures, dims) -> tuple[np.ndarray, ad.Tensor]:
    order = _zmajor_order(pf.coords, dims)
    return pf.coords[order], ad.take_rows(pf.features, order)


def cosine_sim(p: ad.Tensor, q: ad.Tensor) -> ad.Tensor:
    """p.q / (|p| |q|) for 1-d tensors, norms clamped below at EPS."""
    return ad.div(ad.dot(p, q), ad.mul(ad.l2_norm(p), ad.l2_norm(q)))


def z_weight(r_z: float, s_z: float, alpha: float) -> float:
    """exp(alpha * (r_z - s_z)^2); decays with |dz| for alpha < 0."""
    return float(np.exp(alpha * (r_z - s_z) ** 2))


def _row_norms(x: ad.Tensor) -> ad.Tensor:
    return ad.sqrt(ad.reduce_sum(ad.mul(x, x), axis=1, keepdims=True))


def _pair_term(anchor: ad.Tensor, other: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    """Mean over `other` of w * exp(cos sim), one value per anchor row."""
    dots = ad.matmul(anchor, ad.transpose(other))
    denom = ad.matmul(_row_norms(anchor), ad.transpose(_row_norms(other)))
    sims = ad.exp(ad.div(dots, denom))
    weighted = ad.mul(sims, ad.constant(weights, dtype=sims.data.dtype))
    return ad.reduce_mean(weighted, axis=1, keepdims=True)


def _z_weight_matrix(za: np.ndarray, zb: np.ndarray, depth: int,
                     alpha: float, dtype) -> np.ndarray:
    ra = za.astype(np.float64) / depth
    rb = zb.astype(np.float64) / depth
    return np.exp(alpha * (ra[:, None] - rb[None, :]) ** 2).astype(dtype)


def similarity_loss(certain_fg: PointFeatures, uncertain_fg: PointFeatures,
                    background: PointFeatures, dims: tuple[int, int, int],
                    cfg: LossConfig) -> ad.Tensor:
    """gamma - mean over certain-fg anchors of log(1 + pos/neg).

    pos averages w * exp(cos sim) against uncertain-fg points, neg against
    background points. Any empty set yields a constant 0 with zero gradient.
    """
    if not (len(certain_fg) and len(uncertain_fg) and len(background)):
        return ad.constant(0.0)
    cf_coords, cf = _sorted_features(certain_fg, dims)
    uf_coords, uf = _sorted_features(uncertain_fg, dims)
    bg_coords, bg = _sorted_features(background, dims)
    dtype = cf.data.dtype
    depth = dims[0]
    w_pos = _z_weight_matrix(cf_coords[:, 0], uf_coords[:, 0], depth, cfg.alpha, dtype)
    w_neg = _z_weight_matrix(cf_coords[:, 0], bg_coords[:, 0], depth, cfg.alpha, dtype)
    pos = _pair_term(cf, uf, w_pos)
    neg = _pair_term(cf, bg, w_neg)
    per_anchor = ad.log(ad.add(ad.div(pos, neg), 1.0))
    return ad.sub(ad.constant(cfg.gamma, dtype=dtype), ad.reduce_mean(per_anchor))


def build_consistency_pairs(points: PointSet, mask) -> PairSets:
    """Pair every sampled point at z >= 1 with (z-1, y, x).

    Equal mask labels give positives, differing labels negatives; points in
    the z = 0 frame are skipped. Pairs come out sorted by anchor z-major
    index.
    """
    m = as_volume_array(mask, name="mask")
    pts = points.all_points()
    if len(pts) == 0:
        empty = np.empty((0, 2, 3), dtype=np.int64)
        return PairSets(empty, empty.copy())
    order = _zmajor_order(pts, m.shape)
    pts = pts[order]
    keep = pts[:, 0] >= 1
    anchors = pts[keep]
    partners = anchors - np.array([1, 0, 0], dtype=np.int64)
    if len(anchors) == 0:
        empty = np.empty((0, 2, 3), dtype=np.int64)
        return PairSets(empty, empty.copy())
    la = m[anchors[:, 0], anchors[:, 1], anchors[:, 2]] != 0
    lp = m[partners[:, 0], partners[:, 1], partners[:, 2]] != 0
    same = la == lp
    pairs = np.stack([anchors, partners], axis=1)
    return PairSets(positives=pairs[same], negatives=pairs[~same])


def _rowwise_exp_cos(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    dots = ad.reduce_sum(ad.mul(a, b), axis=1)
    na = ad.sqrt(ad.reduce_sum(ad.mul(a, a), axis=1))
    nb = ad.sqrt(ad.reduce_sum(ad.mul(b, b), axis=1))
    return ad.exp(ad.div(dots, ad.mul(na, nb)))


def consistency_loss(pos_anchor: PointFeatures, pos_partner: PointFeatures,
                     neg_anchor: PointFeatures, neg_partner: PointFeatures,
                     dims: tuple[int, int, int], cfg: LossConfig) -> ad.Tensor:
    """log(1 + pos/neg) over adjacent-frame pairs (as-written mode).

    pos / neg are means of exp(cos sim) over the positive / negative pair
    sets; goal-consistent mode returns gamma - log(1 + pos/neg). Empty
    positives or negatives yield a constant 0.
    """
    if not (len(pos_anchor) and len(neg_anchor)):
        return ad.constant(0.0)
    order_p = _zmajor_order(pos_anchor.coords, dims)
    order_n = _zmajor_order(neg_anchor.coords, dims)
    pa = ad.take_rows(pos_anchor.features, order_p)
    pp = ad.take_rows(pos_partner.features, order_p)
    na = ad.take_rows(neg_anchor.features, order_n)
    npart = ad.take_rows(neg_partner.features, order_n)
    pos = ad.reduce_mean(_rowwise_exp_cos(pa, pp))
    neg = ad.reduce_mean(_rowwise_exp_cos(na, npart))
    raw = ad.log(ad.add(ad.div(pos, neg), 1.0))
    if cfg.consistency_sign == "goal-consistent":
        return ad.sub(ad.constant(cfg.gamma, dtype=raw.data.dtype), raw)
    return raw


@dataclass
class CrossEntropy:
    """Summed and per-voxel-mean forms; the optimizer uses the mean."""

    total: ad.Tensor
    mean: ad.Tensor


def cross_entropy_loss(p_m: ad.Tensor, mask, p_b: ad.Tensor, boundary,
                       eps: float = 1e-7) -> CrossEntropy:
    """Pixel-summed binary cross-entropy over both heads.

    -log(P_m)*M - log(1-P_m)*(1-M) summed over voxels, plus the same form
    for the boundary head; probabilities are clamped away from {0, 1} by
    the log primitive.
    """
    m = as_volume_array(mask, name="mask").astype(p_m.data.dtype)
    b = as_volume_array(boundary, name="boundary").astype(p_b.data.dtype)
    pm_flat = p_m.data.reshape(m.shape)
    check_same_shape(pm_flat, m, p_b.data.reshape(b.shape), b)

    def head(p: ad.Tensor, target: np.ndarray) -> ad.Tensor:
        t = ad.constant(target.reshape(p.data.shape), dtype=p.data.dtype)
        pos = ad.reduce_sum(ad.mul(ad.log(p, eps), t))
        neg = ad.reduce_sum(ad.mul(ad.log(_one_minus(p), eps), _one_minus_const(t)))
        return ad.mul(ad.add(pos, neg), -1.0)

    total = ad.add(head(p_m, m), head(p_b, b))
    mean = ad.mul(total, 1.0 / m.size)
    return CrossEntropy(total=total, mean=mean)


def _one_minus(p: ad.Tensor) -> ad.Tensor:
    return ad.sub(ad.constant(1.0, dtype=p.data.dtype), p)


def _one_minus_const(t: ad.Tensor) -> ad.Tensor:
    return ad.constant(1.0 - t.data, dtype=t.data.dtype)


def total_loss(l_ce: ad.Tensor, l_sim: ad.Tensor, l_con: ad.Tensor,
               cfg: LossConfig) -> ad.Tensor:
    """L_ce + lambda1 * L_sim + lambda2 * L_con."""
    return ad.add(l_ce, ad.add(ad.mul(l_sim, cfg.lambda1),
                               ad.mul(l_con, cfg.lambda2)))
