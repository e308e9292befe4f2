"""Pixel-level Jaccard and size-stratified instance AP at IoU 0.75.

A predicted instance counts as a true positive only when it matches an
unmatched ground-truth instance with voxel IoU >= 0.75. Matching is greedy
in descending score order (score ties broken by instance id); each
prediction picks the eligible ground-truth instance of maximal IoU, ties
by smaller id. AP is the area under the precision-recall curve with the
continuous (every-point) interpolation.

Per-bin results stratify by ground-truth instance size; matched
predictions enter their matched instance's bin, unmatched predictions the
bin of their own size, and every prediction additionally counts in "all".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from ._validation import as_volume_array, check_same_shape
from .watershed import InstanceSeg
from .volume import Volume

BINS = ("small", "medium", "large", "all")
IOU_THRESHOLD = 0.75


@dataclass(frozen=True)
class SizeBins:
    small_max: int = 5000    # instances up to this many voxels are "small"
    large_min: int = 30000   # instances with at least this many are "large"

    def __post_init__(self):
        if not 0 < self.small_max < self.large_min:
            raise ValueError(f"need 0 < small_max < large_min, got "
                             f"{self.small_max}, {self.large_min}")

    def bin_of(self, size: int) -> str:
        if size <= self.small_max:
            return "small"
        if size >= self.large_min:
            return "large"
        return "medium"


@dataclass
class EvalReport:
    jaccard: float
    ap75: dict[str, float]
    counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def jaccard(pred, gt) -> float:
    """TP / (TP + FP + FN) over foreground voxels; 1.0 when both are empty."""
    p = as_volume_array(pred, name="pred") != 0
    g = as_volume_array(gt, name="gt") != 0
    check_same_shape(p, g)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    if tp + fp + fn == 0:
        return 1.0
    return tp / (tp + fp + fn)


def instance_sizes(labels: np.ndarray) -> dict[int, int]:
    ids, counts = np.unique(labels[labels != 0], return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}


def instance_iou_matrix(pred, gt) -> dict[tuple[int, int], float]:
    """IoU for every overlapping (pred id, gt id) pair; zeros are implicit."""
    p = _labels_array(pred)
    g = as_volume_array(gt, name="gt").astype(np.int64)
    check_same_shape(p, g)
    both = (p != 0) & (g != 0)
    p_sizes = instance_sizes(p)
    g_sizes = instance_sizes(g)
    if not both.any():
        return {}
    pairs = p[both] * (int(g.max()) + 1) + g[both]
    pair_ids, counts = np.unique(pairs, return_counts=True)
    base = int(g.max()) + 1
    out: dict[tuple[int, int], float] = {}
    for pair, inter in zip(pair_ids, counts):
        pi, gi = int(pair // base), int(pair % base)
        union = p_sizes[pi] + g_sizes[gi] - int(inter)
        out[(pi, gi)] = int(inter) / union
    return out


def _labels_array(pred) -> np.ndarray:
    if isinstance(pred, InstanceSeg):
        return pred.labels.data.astype(np.int64)
    return as_volume_array(pred, name="pred").astype(np.int64)


def _pred_scores(pred, n_pred: int) -> np.ndarray:
    if isinstance(pred, InstanceSeg) and len(pred.scores) == n_pred:
        return np.asarray(pred.scores, dtype=np.float64)
    # fall back to id order when no scores are available
    return -np.arange(1, n_pred + 1, dtype=np.float64)


def match_instances(pred, gt) -> list[dict]:
    """Greedy score-ranked matching of predictions to ground truth.

    Returns one record per prediction, in rank order: its score, matched gt
    id (0 if none reached the IoU threshold), the achieved IoU, and sizes.
    """
    p = _labels_array(pred)
    g = as_volume_array(gt, name="gt").astype(np.int64)
    iou = instance_iou_matrix(p, g)
    p_sizes = instance_sizes(p)
    g_sizes = instance_sizes(g)
    scores = _pred_scores(pred, len(p_sizes))
    pred_ids = sorted(p_sizes)
    order = sorted(range(len(pred_ids)), key=lambda i: (-scores[i], pred_ids[i]))

    matched_gt: set[int] = set()
    records = []
    for i in order:
        pid = pred_ids[i]
        candidates = [(giou, gid) for (pi, gid), giou in iou.items()
                      if pi == pid and gid not in matched_gt
                      and giou >= IOU_THRESHOLD]
        if candidates:
            best_iou, best_gt = max(candidates, key=lambda t: (t[0], -t[1]))
            matched_gt.add(best_gt)
            records.append({"pred_id": pid, "score": float(scores[i]),
                            "gt_id": best_gt, "iou": best_iou,
                            "pred_size": p_sizes[pid],
                            "gt_size": g_sizes[best_gt]})
        else:
            records.append({"pred_id": pid, "score": float(scores[i]),
                            "gt_id": 0, "iou": 0.0,
                            "pred_size": p_sizes[pid], "gt_size": 0})
    return records


def average_precision(tp_flags: list[bool], n_gt: int) -> float:
    """Every-point interpolated AP from ranked TP flags.

    With no ground truth, returns 1.0 when there are no predictions either
    (nothing to find, nothing found) and 0.0 otherwise.
    """
    if n_gt == 0:
        return 1.0 if not tp_flags else 0.0
    if not tp_flags:
        return 0.0
    tps = np.cumsum(np.asarray(tp_flags, dtype=np.int64))
    ranks = np.arange(1, len(tp_flags) + 1)
    recall = tps / n_gt
    precision = tps / ranks
    # precision envelope, monotone non-increasing from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def compile_report(records: list[dict], gt_sizes: list[int],
                   bins: SizeBins, jaccard_value: float) -> EvalReport:
    """Build an EvalReport from (possibly pooled) match records.

    Records are re-ranked by descending score with a stable sort, so ties
    keep their input order.
    """
    records = sorted(records, key=lambda r: -r["score"])
    gt_bin_counts = {b: 0 for b in BINS}
    for size in gt_sizes:
        gt_bin_counts[bins.bin_of(size)] += 1
        gt_bin_counts["all"] += 1

    per_bin_flags: dict[str, list[bool]] = {b: [] for b in BINS}
    for rec in records:
        tp = rec["gt_id"] != 0
        size = rec["gt_size"] if tp else rec["pred_size"]
        per_bin_flags[bins.bin_of(size)].append(tp)
        per_bin_flags["all"].append(tp)

    ap = {b: average_precision(per_bin_flags[b], gt_bin_counts[b]) for b in BINS}
    counts = {}
    for b in BINS:
        tp_n = sum(per_bin_flags[b])
        counts[b] = {"tp": tp_n, "fp": len(per_bin_flags[b]) - tp_n,
                     "fn": gt_bin_counts[b] - tp_n}
    return EvalReport(jaccard=jaccard_value, ap75=ap, counts=counts)


def ap75(pred, gt, bins: SizeBins = SizeBins()) -> EvalReport:
    """Size-stratified AP at IoU 0.75 plus foreground Jaccard."""
    g = as_volume_array(gt, name="gt").astype(np.int64)
    records = match_instances(pred, g)
    g_sizes = instance_sizes(g)
    p = _labels_array(pred)
    return compile_report(records, list(g_sizes.values()), bins, jaccard(p, g))
