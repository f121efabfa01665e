"""Image-level AUROC and pixel-level AUPRO.

AUROC is the rank-based Mann-Whitney statistic with ties counted half.
AUPRO sweeps every distinct pooled score value as a threshold; at each one
it takes the mean per-region overlap across all 8-connected ground-truth
components and the false-positive rate over all normal pixels, then
integrates overlap against FPR up to the limit by trapezoid and normalizes
by the limit. The sweep is evaluated with cumulative sums over the pixels
sorted by descending score, which is exact: tied scores flip as one block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import MetricError

FPR_LIMIT = 0.3
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
CURVE_SAMPLES = 256


def auroc(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be 1-d and equal")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes present")
    ranks = rankdata(s)  # average ranks, so ties contribute half
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def connected_components(mask) -> list[np.ndarray]:
    """8-connected regions of a binary mask as (n_i, 2) pixel index arrays."""
    m = np.asarray(mask) != 0
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-d, got {m.shape}")
    labeled, count = ndimage.label(m, structure=EIGHT_CONNECTED)
    return [np.argwhere(labeled == i) for i in range(1, count + 1)]


def _pooled_curve(score_maps, gt_masks):
    """(fpr, pro) points over all distinct pooled thresholds, descending."""
    flat_scores = []
    flat_region = []
    region_sizes = []
    for smap, mask in zip(score_maps, gt_masks):
        values = np.asarray(smap, dtype=np.float64)
        m = np.asarray(mask) != 0
        if values.shape != m.shape:
            raise ValueError(f"map {values.shape} does not align with mask {m.shape}")
        region_id = np.full(values.shape, -1, dtype=np.int64)
        for pixels in connected_components(m):
            region_id[pixels[:, 0], pixels[:, 1]] = len(region_sizes)
            region_sizes.append(len(pixels))
        flat_scores.append(values.ravel())
        flat_region.append(region_id.ravel())
    scores = np.concatenate(flat_scores)
    region = np.concatenate(flat_region)
    if not region_sizes:
        raise MetricError("AUPRO needs at least one anomalous region")
    n_normal = int((region == -1).sum())
    if n_normal == 0:
        raise MetricError("AUPRO needs normal pixels for a false-positive rate")

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    r_sorted = region[order]
    ends = np.flatnonzero(np.diff(s_sorted) != 0)
    ends = np.append(ends, len(s_sorted) - 1)  # last index of each threshold block

    fp_cum = np.cumsum(r_sorted == -1)
    pro_cum = np.zeros(len(s_sorted))
    for rid, size in enumerate(region_sizes):
        pro_cum += np.cumsum(r_sorted == rid) / size
    pro_cum /= len(region_sizes)

    fpr = np.concatenate([[0.0], fp_cum[ends] / n_normal])
    pro = np.concatenate([[0.0], pro_cum[ends]])
    return fpr, pro


def _clipped_area(fpr, pro, fpr_limit) -> float:
    cross = int(np.searchsorted(fpr, fpr_limit, side="left"))
    if cross == len(fpr):
        xs, ys = fpr, pro
    elif fpr[cross] == fpr_limit:
        xs, ys = fpr[:cross + 1], pro[:cross + 1]
    else:
        frac = (fpr_limit - fpr[cross - 1]) / (fpr[cross] - fpr[cross - 1])
        y_at = pro[cross - 1] + frac * (pro[cross] - pro[cross - 1])
        xs = np.append(fpr[:cross], fpr_limit)
        ys = np.append(pro[:cross], y_at)
    return float(np.trapezoid(ys, xs) / fpr_limit)


def aupro(score_maps, gt_masks, fpr_limit: float = FPR_LIMIT) -> float:
    if not 0 < fpr_limit <= 1:
        raise ValueError(f"fpr limit {fpr_limit} outside (0, 1]")
    if len(score_maps) != len(gt_masks) or len(score_maps) == 0:
        raise ValueError("need equally many maps and masks")
    fpr, pro = _pooled_curve(score_maps, gt_masks)
    return _clipped_area(fpr, pro, fpr_limit)


@dataclass(frozen=True)
class EvalResult:
    image_auroc: float
    pixel_aupro: float
    fpr_limit: float
    per_class: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)


def _downsample(fpr, pro, cap=CURVE_SAMPLES):
    if len(fpr) <= cap:
        idx = np.arange(len(fpr))
    else:
        idx = np.unique(np.linspace(0, len(fpr) - 1, cap).round().astype(int))
    return [[float(fpr[i]), float(pro[i])] for i in idx]


def evaluate(scores, labels, score_maps=None, gt_masks=None, classes=None,
             fpr_limit: float = FPR_LIMIT) -> EvalResult:
    """Dataset-level metrics with an optional per-class breakdown; each
    anomalous class is scored against all normal samples."""
    image = auroc(scores, labels)
    pixel = float("nan")
    curve = []
    if score_maps is not None:
        fpr, pro = _pooled_curve(score_maps, gt_masks)
        pixel = _clipped_area(fpr, pro, fpr_limit)
        curve = _downsample(fpr, pro)
    per_class = {}
    if classes is not None:
        y = np.asarray(labels)
        cls = np.asarray(classes, dtype=object)
        normal_idx = np.flatnonzero(y == 0)
        for name in sorted(set(cls[y == 1])):
            keep = np.concatenate([normal_idx, np.flatnonzero((y == 1) & (cls == name))])
            entry = {"image_auroc": auroc(np.asarray(scores)[keep], y[keep])}
            if score_maps is not None:
                entry["pixel_aupro"] = aupro(
                    [score_maps[i] for i in keep], [gt_masks[i] for i in keep], fpr_limit
                )
            per_class[str(name)] = entry
    return EvalResult(image, pixel, fpr_limit, per_class, curve)
