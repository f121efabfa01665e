"""Pseudo-anomaly synthesis from interest points and normal surfaces.

Two patch-level defect types are synthesized against normal host maps:
adding-type patches translate interest points harvested from task-irrelevant
samples onto a random surface site, removing-type patches delete a random
ratio of a local neighborhood and pad it back by resampling survivors. The
training stream pairs every admitted normal patch (label 0) with 16
synthesized abnormal patches (label 1), half of each type.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import OrderedPointMap, partition
from .errors import ConfigError, SynthesisError
from .geometry import KdTree

PATCH_POINTS = 64


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class SynthesisConfig:
    tau: float = 0.001
    surround_s: int = 16
    removal_lo: float = 0.2
    removal_hi: float = 0.8
    negatives_per_positive: int = 16
    min_foreground_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau {self.tau} outside (0, 1]")
        if self.surround_s < 0:
            raise ConfigError("surround count must be >= 0")
        if not 0 < self.removal_lo <= self.removal_hi < 1:
            raise ConfigError("removal range must lie inside (0, 1)")
        if self.negatives_per_positive < 2 or self.negatives_per_positive % 2:
            raise ConfigError("negatives per positive must be a positive even count")


@dataclass(frozen=True)
class PseudoPatch:
    points: np.ndarray  # (64, 3)
    label: int          # 0 normal, 1 pseudo-abnormal
    kind: str           # adding | removing | none
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (PATCH_POINTS, 3):
            raise ValueError(f"patch must hold {PATCH_POINTS} points, got {pts.shape}")
        if (self.label == 1) != (self.kind != "none"):
            raise ValueError(f"label {self.label} inconsistent with kind {self.kind!r}")
        object.__setattr__(self, "points", pts)


def extract_interest_points(pm: OrderedPointMap, mask: np.ndarray) -> np.ndarray:
    """xyz values at masked pixels, sentinels excluded."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (pm.height, pm.width):
        raise ValueError(f"mask shape {mask.shape} does not match map")
    pts = pm.points[mask & pm.foreground_mask()]
    if len(pts) == 0:
        raise SynthesisError("all masked pixels are sentinels")
    return pts.astype(np.float64)


def _host_cloud(normal_map: OrderedPointMap, host_tree: KdTree | None):
    if host_tree is not None:
        return host_tree.points, host_tree
    host = normal_map.foreground_points().astype(np.float64)
    if len(host) < PATCH_POINTS:
        raise ValueError(f"host map has {len(host)} foreground points, need 64")
    return host, KdTree(host)


def make_adding_patch(
    normal_map: OrderedPointMap,
    interest_points: np.ndarray,
    cfg: SynthesisConfig,
    seed: int,
    host_tree: KdTree | None = None,
) -> PseudoPatch:
    """Translate interest points onto a random surface site and cut the
    64-NN patch around the joint anchor; must straddle both point sources."""
    host, tree = _host_cloud(normal_map, host_tree)
    if len(host) < PATCH_POINTS:
        raise ValueError(f"host map has {len(host)} foreground points, need 64")
    interest = np.asarray(interest_points, dtype=np.float64)
    if interest.ndim != 2 or interest.shape[1] != 3 or len(interest) == 0:
        raise ValueError("interest points must be a non-empty (m, 3) array")
    rng = np.random.default_rng(seed)
    centroid = interest.mean(axis=0)
    for attempt in range(11):
        site = host[int(rng.integers(len(host)))]
        translated = interest - centroid + site
        s = min(cfg.surround_s, len(host))
        if s > 0:
            idx, _ = tree.knn_batch(site[None], s)
            anchor_cloud = np.vstack([translated, host[idx[0]]])
        else:
            anchor_cloud = translated
        anchor = anchor_cloud.mean(axis=0)
        # the union's 64 nearest are always among the host's 64 nearest plus
        # every translated point, so the host tree answers the union query
        n_cand = min(PATCH_POINTS, len(host))
        host_idx, _ = tree.knn_batch(anchor[None], n_cand)
        cand_pts = np.vstack([host[host_idx[0]], translated])
        cand_union_idx = np.concatenate(
            [host_idx[0], len(host) + np.arange(len(translated))]
        )
        diff = cand_pts - anchor
        d2 = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((cand_union_idx, d2))[:PATCH_POINTS]
        take = cand_union_idx[order]
        has_host = (take < len(host)).any()
        has_injected = (take >= len(host)).any()
        if has_host and has_injected:
            return PseudoPatch(
                cand_pts[order],
                1,
                "adding",
                {"site": tuple(map(float, site)), "anchor": tuple(map(float, anchor)),
                 "seed": int(seed), "attempts": attempt + 1},
            )
    raise SynthesisError("could not place an adding patch containing both sources")


def make_removing_patch(
    normal_map: OrderedPointMap,
    cfg: SynthesisConfig,
    seed: int,
    r: float | None = None,
    host_tree: KdTree | None = None,
) -> PseudoPatch:
    """Remove round(r*64) points from a random 64-NN neighborhood and pad
    back to 64 by resampling the survivors with replacement."""
    host, tree = _host_cloud(normal_map, host_tree)
    if len(host) < PATCH_POINTS:
        raise ValueError(f"host map has {len(host)} foreground points, need 64")
    rng = np.random.default_rng(seed)
    anchor = host[int(rng.integers(len(host)))]
    idx, _ = tree.knn_batch(anchor[None], PATCH_POINTS)
    hood = host[idx[0]]
    if r is None:
        r = float(rng.uniform(cfg.removal_lo, cfg.removal_hi))
    n_remove = round_half_up(r * PATCH_POINTS)
    keep = np.sort(rng.choice(PATCH_POINTS, size=PATCH_POINTS - n_remove, replace=False))
    survivors = hood[keep]
    pad = survivors[rng.integers(len(survivors), size=n_remove)]
    return PseudoPatch(
        np.vstack([survivors, pad]),
        1,
        "removing",
        {"anchor": tuple(map(float, anchor)), "ratio": float(r), "seed": int(seed)},
    )


def _patch_seed(stream_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([stream_seed, index]).generate_state(1)[0])


def build_training_set(
    normal_maps,
    task_irrelevant_maps,
    cfg: SynthesisConfig,
    interest_points_of,
    patch_size: int = 8,
    test_class: str | None = None,
    irrelevant_labels=None,
):
    """Yield the deterministic labeled patch stream for one training run.

    Every admitted normal patch (>= 50% foreground by default) is followed by
    16 abnormal patches, 8 adding-type and 8 removing-type. `interest_points_of`
    maps a task-irrelevant sample to its interest points; samples yielding
    none are skipped, and an empty surviving pool is a configuration error.
    """
    if irrelevant_labels is not None and test_class is not None:
        if test_class in set(irrelevant_labels):
            raise ConfigError(
                f"task-irrelevant pool contains the test class {test_class!r}"
            )
    if not normal_maps:
        raise ConfigError("no normal training maps")
    pools = []
    for m in task_irrelevant_maps:
        try:
            pools.append(interest_points_of(m))
        except SynthesisError:
            continue
    if not pools:
        raise ConfigError("task-irrelevant pool yielded no interest points")

    half = cfg.negatives_per_positive // 2
    min_fg = int(np.ceil(cfg.min_foreground_fraction * patch_size * patch_size))
    counter = 0
    for map_idx, pm in enumerate(normal_maps):
        host = pm.foreground_points().astype(np.float64)
        if len(host) < PATCH_POINTS:
            raise ConfigError(f"training map {map_idx} has under 64 foreground points")
        host_tree = KdTree(host)
        grid = partition(pm, patch_size)
        fg_counts = grid.foreground_counts()
        for p_idx in range(len(grid)):
            if fg_counts[p_idx] < min_fg:
                continue
            yield PseudoPatch(
                grid.blocks[p_idx].astype(np.float64),
                0,
                "none",
                {"map": map_idx, "patch": p_idx},
            )
            for j in range(cfg.negatives_per_positive):
                seed = _patch_seed(cfg.seed, counter)
                counter += 1
                rng = np.random.default_rng(seed)
                if j < half:
                    # a pool whose points all sit far from their own centroid
                    # can never straddle the anchor; redraw a bounded number
                    # of times, mirroring the empty-extraction retry
                    patch = None
                    attempt_seed = seed
                    for _ in range(8):
                        pool = pools[int(rng.integers(len(pools)))]
                        try:
                            patch = make_adding_patch(
                                pm, pool, cfg, attempt_seed, host_tree=host_tree
                            )
                            break
                        except SynthesisError:
                            attempt_seed = int(rng.integers(2**63))
                    if patch is None:
                        raise SynthesisError(
                            "no task-irrelevant sample admits an adding patch"
                        )
                else:
                    patch = make_removing_patch(pm, cfg, seed, host_tree=host_tree)
                patch.provenance.update({"map": map_idx, "patch": p_idx})
                yield patch
