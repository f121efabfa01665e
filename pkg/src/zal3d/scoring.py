"""Test-time anomaly scores: reweighted max distance, score maps, input
perturbation, classification scores, and branch fusion.

The distance branch queries original patch features against the memory
bank. The classification branch runs on adversarially perturbed patches:
each centered patch is pushed a step along the direction that lowers the
classifier's confidence in its predicted class, then re-scored. Fusion
min-max normalizes each branch over the whole test set before the weighted
sum, so the two value ranges are commensurate; both behaviors are knobs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bank as bank_mod
from . import imageops, networks
from .data import realign_scalars
from .errors import ConfigError, ScoringError

DIST = "distance"
CLS = "classification"
FUSED = "fused"


@dataclass(frozen=True)
class ScoreConfig:
    b: int = 3
    eta: float = 0.1
    w_d: float = 0.5
    w_c: float = 0.5
    sigma: float = 4.0
    normalize_before_fuse: bool = True

    def __post_init__(self):
        if self.b < 1:
            raise ConfigError("reweighting neighbor count must be >= 1")
        if self.eta < 0:
            raise ConfigError("perturbation magnitude must be >= 0")
        if self.w_d + self.w_c <= 0:
            raise ConfigError("fusion weights must not both vanish")
        if self.sigma <= 0:
            raise ConfigError("blur sigma must be positive")


@dataclass(frozen=True)
class ObjectScore:
    s_dist: float
    s_cls: float
    s: float


@dataclass(frozen=True)
class AnomalyScoreMap:
    values: np.ndarray
    branch: str

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"score map must be 2-d, got {vals.shape}")
        if not np.isfinite(vals).all():
            raise ValueError("score map contains non-finite values")
        if self.branch not in (DIST, CLS, FUSED):
            raise ValueError(f"unknown branch tag {self.branch!r}")
        object.__setattr__(self, "values", vals)


def _feature_rows(test_features) -> np.ndarray:
    feats = np.asarray(test_features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ValueError(f"expected non-empty (n, d) features, got {feats.shape}")
    return feats


def max_distance(test_features, bank: bank_mod.MemoryBank):
    """Patch with the largest nearest-bank distance: (patch index, f*, S*).
    f* is the bank row nearest to that patch; argmax ties go to the smallest
    patch index."""
    feats = _feature_rows(test_features)
    _, dists = bank_mod.nn_batch(bank, feats)
    idx = int(np.argmax(dists))
    nn_idx, s_star = bank_mod.nn_query(bank, feats[idx])
    return idx, bank.rows[nn_idx].copy(), s_star


def dist_score(test_features, bank: bank_mod.MemoryBank, cfg: ScoreConfig) -> float:
    """Reweighted maximum distance score.

    S_dist = (1 - exp(S*) / sum over the b bank rows nearest f* of
    exp(distance from f(x*) to that row)) * S*, evaluated in max-shifted
    log-sum-exp form. With b=1 the neighborhood is {f*} and the score is 0.
    """
    feats = _feature_rows(test_features)
    if cfg.b > len(bank):
        raise ValueError(f"b={cfg.b} exceeds bank size {len(bank)}")
    idx, f_star, s_star = max_distance(feats, bank)
    hood = bank_mod.knn_rows(bank, f_star, cfg.b)
    d = np.array([
        float(np.sqrt(((feats[idx] - bank.rows[row]) ** 2).sum()))
        for row, _ in hood
    ])
    top = d.max()
    lse = top + np.log(np.exp(d - top).sum())
    weight = 1.0 - np.exp(s_star - lse)
    return float(weight * s_star)


def patch_score_map(values, shape, patch_size, cfg, branch) -> AnomalyScoreMap:
    """Realign per-patch values to the grid, resize to the map, Gaussian blur."""
    h, w = shape
    rows, cols = h // patch_size, w // patch_size
    grid = realign_scalars(np.asarray(values, dtype=np.float64), rows, cols)
    up = imageops.resize_bilinear(grid, h, w)
    return AnomalyScoreMap(imageops.gaussian_blur(up, cfg.sigma), branch)


def dist_score_map(test_features, bank: bank_mod.MemoryBank, cfg: ScoreConfig,
                   shape, patch_size: int = 8) -> AnomalyScoreMap:
    """Per-patch nearest-bank distances realigned to the patch grid, resized
    to the map dimensions, then Gaussian blurred."""
    feats = _feature_rows(test_features)
    _, dists = bank_mod.nn_batch(bank, feats)
    return patch_score_map(dists, shape, patch_size, cfg, DIST)


def perturb(classifier, patch, eta: float, patch_id=None) -> np.ndarray:
    """One gradient step against the classifier's confidence:
    x~ = x + eta * (-grad of -log max(p, 1-p)). eta=0 returns the input."""
    pts = np.asarray(patch, dtype=np.float64)
    if pts.shape[-2:] != (networks.PATCH_POINTS, 3):
        raise ValueError(f"expected (*, 64, 3) patch, got {pts.shape}")
    if eta == 0:
        return pts.copy()
    try:
        grad = networks.input_grad(classifier, pts)
    except ValueError as err:
        tag = "" if patch_id is None else f"patch {patch_id}: "
        raise ScoringError(f"{tag}{err}") from err
    return pts + eta * (-grad)


def cls_score(classifier, perturbed_patches) -> float:
    """Maximum class-1 probability over the perturbed patches."""
    probs = networks.classify(classifier, perturbed_patches)
    return float(np.max(probs))


def cls_score_map(classifier, perturbed_patches, cfg: ScoreConfig,
                  shape, patch_size: int = 8) -> AnomalyScoreMap:
    """Per-patch probabilities through the same realign, resize, and blur
    operators as the distance map."""
    probs = networks.classify(classifier, perturbed_patches)
    return patch_score_map(probs, shape, patch_size, cfg, CLS)


def minmax_range(values_list):
    """(lo, hi) over a list of arrays or scalars, for set-level normalization."""
    lo = min(float(np.min(v)) for v in values_list)
    hi = max(float(np.max(v)) for v in values_list)
    return lo, hi


def _apply_range(x, rng):
    lo, hi = rng
    if hi <= lo:
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)


def fuse(dist, cls, cfg: ScoreConfig, dist_range=None, cls_range=None):
    """Weighted branch sum. With normalize_before_fuse, each branch is first
    min-max normalized by its full-test-set range, which the caller passes
    in; scalars fuse to scalars, maps of one shape fuse to that shape."""
    d = np.asarray(dist, dtype=np.float64)
    c = np.asarray(cls, dtype=np.float64)
    if d.shape != c.shape:
        raise ValueError(f"branch shapes differ: {d.shape} vs {c.shape}")
    if cfg.normalize_before_fuse:
        if dist_range is None or cls_range is None:
            raise ValueError("normalization needs per-branch test-set ranges")
        d = _apply_range(d, dist_range)
        c = _apply_range(c, cls_range)
    out = cfg.w_d * d + cfg.w_c * c
    return float(out) if out.ndim == 0 else out


def fuse_maps(dist_map: AnomalyScoreMap, cls_map: AnomalyScoreMap,
              cfg: ScoreConfig, dist_range=None, cls_range=None) -> AnomalyScoreMap:
    values = fuse(dist_map.values, cls_map.values, cfg, dist_range, cls_range)
    return AnomalyScoreMap(values, FUSED)
