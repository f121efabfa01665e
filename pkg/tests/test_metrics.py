import numpy as np
import pytest

from zal3d import metrics
from zal3d.errors import MetricError


def auroc_pairwise(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def aupro_threshold_oracle(score_maps, gt_masks, fpr_limit):
    """Naive re-binarization at every distinct pooled score value."""
    pooled = np.unique(np.concatenate([np.asarray(m).ravel() for m in score_maps]))
    regions = []
    for mi, mask in enumerate(gt_masks):
        for pix in metrics.connected_components(mask):
            regions.append((mi, pix))
    normal_total = sum(
        int((np.asarray(mask) == 0).sum()) for mask in gt_masks
    )
    points = [(0.0, 0.0)]
    for t in sorted(pooled, reverse=True):
        preds = [np.asarray(m) >= t for m in score_maps]
        fp = sum(
            int((preds[i] & (np.asarray(gt_masks[i]) == 0)).sum())
            for i in range(len(score_maps))
        )
        pros = [
            preds[mi][pix[:, 0], pix[:, 1]].sum() / len(pix) for mi, pix in regions
        ]
        points.append((fp / normal_total, float(np.mean(pros))))
    fpr = np.array([p[0] for p in points])
    pro = np.array([p[1] for p in points])
    cross = int(np.searchsorted(fpr, fpr_limit, side="left"))
    if cross == len(fpr):
        xs, ys = fpr, pro
    elif fpr[cross] == fpr_limit:
        xs, ys = fpr[:cross + 1], pro[:cross + 1]
    else:
        frac = (fpr_limit - fpr[cross - 1]) / (fpr[cross] - fpr[cross - 1])
        xs = np.append(fpr[:cross], fpr_limit)
        ys = np.append(pro[:cross], pro[cross - 1] + frac * (pro[cross] - pro[cross - 1]))
    return float(np.trapezoid(ys, xs) / fpr_limit)


def test_auroc_hand_cases():
    assert metrics.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert metrics.auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


def test_auroc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for trial in range(20):
        n = 20
        labels = np.zeros(n, dtype=int)
        labels[: int(rng.integers(1, n))] = 1
        rng.shuffle(labels)
        scores = rng.normal(size=n)
        if trial % 3 == 0:
            scores = np.round(scores, 1)  # force ties
        assert metrics.auroc(scores, labels) == auroc_pairwise(scores, labels)


def test_auroc_monotone_invariance_and_flip():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=30)
    labels = (rng.uniform(size=30) < 0.4).astype(int)
    labels[0], labels[1] = 0, 1
    base = metrics.auroc(scores, labels)
    assert metrics.auroc(np.exp(scores), labels) == base
    assert metrics.auroc(3 * scores + 7, labels) == base
    assert metrics.auroc(-scores, labels) == pytest.approx(1.0 - base)


def test_auroc_errors():
    with pytest.raises(MetricError):
        metrics.auroc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        metrics.auroc([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        metrics.auroc([0.1], [2])


def test_connected_components_rules():
    mask = np.zeros((8, 8), dtype=int)
    mask[1:3, 1:3] = 1
    mask[5:7, 5:7] = 1
    comps = metrics.connected_components(mask)
    assert len(comps) == 2
    assert sorted(len(c) for c in comps) == [4, 4]
    assert metrics.connected_components(np.zeros((4, 4))) == []
    diag = np.zeros((4, 4), dtype=int)
    diag[0, 0] = diag[1, 1] = diag[2, 2] = 1
    assert len(metrics.connected_components(diag)) == 1  # 8-connectivity merges


def test_aupro_perfect_and_anticorrelated():
    rng = np.random.default_rng(2)
    masks = []
    for _ in range(3):
        m = np.zeros((16, 16), dtype=int)
        r, c = rng.integers(2, 10, size=2)
        m[r:r + 4, c:c + 4] = 1
        masks.append(m)
    perfect = [m.astype(float) for m in masks]
    assert metrics.aupro(perfect, masks) == pytest.approx(1.0)
    inverted = [1.0 - m for m in perfect]
    assert metrics.aupro(inverted, masks) < 0.05


def test_aupro_matches_threshold_oracle():
    rng = np.random.default_rng(3)
    for trial in range(6):
        maps = []
        masks = []
        for _ in range(2):
            mask = np.zeros((24, 24), dtype=int)
            r, c = rng.integers(2, 16, size=2)
            mask[r:r + 5, c:c + 5] = 1
            if trial % 2:
                r2, c2 = rng.integers(2, 18, size=2)
                mask[r2:r2 + 3, c2:c2 + 3] = 1
            noise = rng.normal(size=(24, 24))
            score = noise + 2.0 * mask * rng.uniform(0.2, 1.5)
            if trial % 3 == 0:
                score = np.round(score, 1)  # tie blocks
            maps.append(score)
            masks.append(mask)
        got = metrics.aupro(maps, masks, 0.3)
        want = aupro_threshold_oracle(maps, masks, 0.3)
        assert abs(got - want) < 1e-6, f"trial {trial}: {got} vs {want}"


def test_aupro_single_region_tpr_curve():
    rng = np.random.default_rng(4)
    mask = np.zeros((32, 32), dtype=int)
    mask[10:18, 12:20] = 1
    score = rng.normal(size=(32, 32)) + 1.5 * mask
    got = metrics.aupro([score], [mask], 0.3)
    want = aupro_threshold_oracle([score], [mask], 0.3)
    assert abs(got - want) < 1e-6


def test_aupro_monotone_transform_invariance():
    rng = np.random.default_rng(5)
    mask = np.zeros((16, 16), dtype=int)
    mask[4:9, 4:9] = 1
    score = rng.normal(size=(16, 16)) + mask
    base = metrics.aupro([score], [mask], 0.3)
    assert metrics.aupro([np.exp(score)], [mask], 0.3) == pytest.approx(base, abs=1e-12)
    assert metrics.aupro([5 * score - 3], [mask], 0.3) == pytest.approx(base, abs=1e-12)


def test_aupro_nondecreasing_in_fpr_limit():
    rng = np.random.default_rng(6)
    mask = np.zeros((16, 16), dtype=int)
    mask[2:7, 9:14] = 1
    score = rng.normal(size=(16, 16)) + 0.5 * mask
    values = [metrics.aupro([score], [mask], lim) for lim in (0.1, 0.3, 1.0)]
    assert values[0] <= values[1] + 1e-12 <= values[2] + 2e-12


def test_aupro_errors():
    clean = np.zeros((8, 8), dtype=int)
    score = np.random.default_rng(7).normal(size=(8, 8))
    with pytest.raises(MetricError):
        metrics.aupro([score], [clean])
    full = np.ones((8, 8), dtype=int)
    with pytest.raises(MetricError):
        metrics.aupro([score], [full])
    with pytest.raises(ValueError):
        metrics.aupro([score], [np.zeros((4, 4))])
    with pytest.raises(ValueError):
        metrics.aupro([], [])
    with pytest.raises(ValueError):
        metrics.aupro([score], [clean], fpr_limit=0.0)


def test_evaluate_bundles_metrics_and_breakdown():
    rng = np.random.default_rng(8)
    n = 12
    labels = np.array([0] * 6 + [1] * 6)
    classes = ["good"] * 6 + ["bump"] * 3 + ["dent"] * 3
    scores = np.where(labels == 1, 0.8, 0.2) + rng.normal(0, 0.01, size=n)
    maps = []
    masks = []
    for i in range(n):
        mask = np.zeros((16, 16), dtype=int)
        if labels[i]:
            mask[3:8, 3:8] = 1
        maps.append(rng.normal(size=(16, 16)) * 0.1 + mask)
        masks.append(mask)
    result = metrics.evaluate(scores, labels, maps, masks, classes=classes)
    assert result.image_auroc == metrics.auroc(scores, labels)
    assert result.pixel_aupro == metrics.aupro(maps, masks)
    assert result.fpr_limit == 0.3
    assert set(result.per_class) == {"bump", "dent"}
    bump_keep = list(range(6)) + [6, 7, 8]
    assert result.per_class["bump"]["image_auroc"] == metrics.auroc(
        scores[bump_keep], labels[bump_keep]
    )
    assert len(result.curve) >= 2
    fprs = [p[0] for p in result.curve]
    assert fprs == sorted(fprs)
