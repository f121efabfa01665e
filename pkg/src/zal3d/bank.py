"""Combined patch features, k-center coreset selection, memory-bank queries.

A bank row is the concatenation [rgb | fpfh | learned] for one retained
patch. Selection is greedy minimax facility location: after a seeded first
center, each new center is the point farthest from its nearest selected
center, which carries the classic 2-approximation guarantee for the k-center
coverage radius. All query paths are exact f64 linear scans; desk-scale
banks never need an approximate index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .errors import ConfigError, EmptyBankError, FormatError
from .geometry import FPFH_DIM
from .networks import FEATURE_DIM
from .pseudo import round_half_up

DEFAULT_RATIO = 0.1
DEFAULT_KNN = 3


@dataclass(frozen=True)
class CombinedFeature:
    values: np.ndarray
    rgb_width: int

    @property
    def width(self) -> int:
        return self.rgb_width + FPFH_DIM + FEATURE_DIM


def combine(fpfh, learned, rgb=None) -> CombinedFeature:
    """Concatenate per-patch blocks in the fixed order [rgb | fpfh | learned]."""
    fpfh = np.asarray(fpfh, dtype=np.float64)
    learned = np.asarray(learned, dtype=np.float64)
    if fpfh.shape != (FPFH_DIM,):
        raise ValueError(f"fpfh block must be ({FPFH_DIM},), got {fpfh.shape}")
    if learned.shape != (FEATURE_DIM,):
        raise ValueError(f"learned block must be ({FEATURE_DIM},), got {learned.shape}")
    blocks = [fpfh, learned]
    rgb_width = 0
    if rgb is not None:
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim != 1 or rgb.size == 0:
            raise ValueError("rgb block must be a non-empty vector")
        rgb_width = rgb.size
        blocks.insert(0, rgb)
    values = np.concatenate(blocks)
    if not np.isfinite(values).all():
        raise ValueError("combined feature contains non-finite values")
    return CombinedFeature(values, rgb_width)


def combine_rows(fpfh, learned, rgb=None) -> np.ndarray:
    """Row-wise combine for a whole sample; returns (n, width) f64."""
    fpfh = np.asarray(fpfh, dtype=np.float64)
    learned = np.asarray(learned, dtype=np.float64)
    if fpfh.ndim != 2 or fpfh.shape[1] != FPFH_DIM:
        raise ValueError(f"fpfh rows must be (n, {FPFH_DIM}), got {fpfh.shape}")
    if learned.shape != (len(fpfh), FEATURE_DIM):
        raise ValueError(f"learned rows must be ({len(fpfh)}, {FEATURE_DIM})")
    blocks = [fpfh, learned]
    if rgb is not None:
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim != 2 or len(rgb) != len(fpfh):
            raise ValueError("rgb rows must align with the other blocks")
        blocks.insert(0, rgb)
    out = np.concatenate(blocks, axis=1)
    if not np.isfinite(out).all():
        raise ValueError("combined features contain non-finite values")
    return out


def coreset_select(features, ratio: float, seed: int) -> list[int]:
    """Greedy k-center indices; k = max(1, round(ratio * n)), first center
    seeded, each next center maximizes distance to the selected set, ties to
    the smallest index."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ValueError(f"expected non-empty (n, d) features, got {feats.shape}")
    if not np.isfinite(feats).all():
        raise ValueError("features contain non-finite values")
    if not 0 < ratio <= 1:
        raise ConfigError(f"coreset ratio {ratio} outside (0, 1]")
    n = len(feats)
    k = max(1, round_half_up(ratio * n))
    rng = np.random.default_rng(int(seed))
    first = int(rng.integers(n))
    selected = [first]
    diff = feats - feats[first]
    d2 = np.einsum("ij,ij->i", diff, diff)
    while len(selected) < k:
        nxt = int(np.argmax(d2))  # first occurrence = smallest index on ties
        selected.append(nxt)
        diff = feats - feats[nxt]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", diff, diff))
    return selected


@dataclass(frozen=True)
class MemoryBank:
    rows: np.ndarray                 # (m, width) f64
    rgb_width: int = 0
    ratio: float = DEFAULT_RATIO
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError(f"bank rows must be 2-d, got shape {rows.shape}")
        if self.provenance and len(self.provenance) != len(rows):
            raise ValueError("provenance length does not match row count")
        rows = rows.copy()
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def width(self) -> int:
        return self.rows.shape[1]


def build_bank(features, ratio: float, seed: int, rgb_width: int = 0,
               provenance=None) -> MemoryBank:
    feats = np.asarray(features, dtype=np.float64)
    keep = coreset_select(feats, ratio, seed)
    prov = [provenance[i] for i in keep] if provenance else []
    return MemoryBank(feats[keep], rgb_width, ratio, prov)


def _check_query(bank: MemoryBank, f) -> np.ndarray:
    if len(bank) == 0:
        raise EmptyBankError("memory bank has no rows")
    q = np.asarray(f.values if isinstance(f, CombinedFeature) else f, dtype=np.float64)
    if q.shape != (bank.width,):
        raise ValueError(f"query width {q.shape} does not match bank width {bank.width}")
    return q


def nn_query(bank: MemoryBank, f) -> tuple[int, float]:
    """Exact nearest bank row: (row index, L2 distance), ties to smallest index."""
    q = _check_query(bank, f)
    d2 = ((bank.rows - q) ** 2).sum(axis=1)
    idx = int(np.argmin(d2))
    return idx, float(np.sqrt(d2[idx]))


def knn_rows(bank: MemoryBank, f, b: int = DEFAULT_KNN) -> list[tuple[int, float]]:
    """Exact b nearest bank rows ascending by distance, ties by row index."""
    q = _check_query(bank, f)
    if not 1 <= b <= len(bank):
        raise ValueError(f"b={b} outside [1, {len(bank)}]")
    d2 = ((bank.rows - q) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(d2)), d2))[:b]
    return [(int(i), float(np.sqrt(d2[i]))) for i in order]


def nn_batch(bank: MemoryBank, queries, chunk: int = 64):
    """nn_query over many rows at once; returns (indices, distances)."""
    if len(bank) == 0:
        raise EmptyBankError("memory bank has no rows")
    qs = np.asarray(queries, dtype=np.float64)
    if qs.ndim != 2 or qs.shape[1] != bank.width:
        raise ValueError(f"queries must be (n, {bank.width}), got {qs.shape}")
    idx = np.empty(len(qs), dtype=np.int64)
    dist = np.empty(len(qs), dtype=np.float64)
    for lo in range(0, len(qs), chunk):
        block = qs[lo:lo + chunk]
        d2 = ((block[:, None, :] - bank.rows[None, :, :]) ** 2).sum(axis=2)
        best = np.argmin(d2, axis=1)
        idx[lo:lo + len(block)] = best
        dist[lo:lo + len(block)] = np.sqrt(d2[np.arange(len(block)), best])
    return idx, dist


def save_bank(path, bank: MemoryBank, seed=None):
    formats.write_tensors(
        path,
        {"rows": bank.rows, "rgb_width": float(bank.rgb_width), "ratio": bank.ratio},
        magic=b"ZALB",
    )
    sidecar = {
        "ratio": bank.ratio,
        "rgb_width": bank.rgb_width,
        "rows": bank.provenance,
    }
    if seed is not None:
        sidecar["seed"] = int(seed)
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_bank(path) -> MemoryBank:
    tensors = formats.read_tensors(path, magic=b"ZALB")
    for key in ("rows", "rgb_width", "ratio"):
        if key not in tensors:
            raise FormatError(f"bank file missing {key!r}")
    try:
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError as err:
        raise FormatError(f"missing bank provenance sidecar: {err}") from err
    # the sidecar carries the exact ratio; the tensor copy is f32
    return MemoryBank(
        tensors["rows"],
        int(tensors["rgb_width"]),
        float(sidecar.get("ratio", tensors["ratio"])),
        sidecar.get("rows", []),
    )
