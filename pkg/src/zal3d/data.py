"""Ordered point maps, patch partitioning, synthetic objects, defect injection.

An ordered point map is an H x W grid whose cells hold xyz coordinates.
The all-zero vector is the sentinel for "no measured point". Synthetic
objects live in a [-extent, extent]^2 world frame viewed top-down along z,
with sentinel background around each footprint.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .errors import ConfigError

ROLES = ("train", "test-normal", "test-anomalous", "task-irrelevant")
OBJECT_KINDS = ("sphere", "box", "cylinder", "wavy-plane")
DEFECT_KINDS = ("bump", "dent", "blob-add", "hole")


def _frozen_array(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class OrderedPointMap:
    points: np.ndarray  # (H, W, 3) float32, all-zero cell = sentinel

    def __post_init__(self):
        pts = self.points
        if pts.ndim != 3 or pts.shape[2] != 3 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"expected (H, W, 3) grid, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point map contains NaN or Inf coordinates")
        object.__setattr__(self, "points", _frozen_array(pts))

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    def foreground_mask(self) -> np.ndarray:
        return ~np.all(self.points == 0.0, axis=2)

    def foreground_points(self) -> np.ndarray:
        return self.points[self.foreground_mask()]


@dataclass(frozen=True)
class Patch:
    grid_row: int
    grid_col: int
    points: np.ndarray  # (patch_size**2, 3)


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    rows: int
    cols: int
    blocks: np.ndarray  # (rows*cols, patch_size**2, 3) row-major patches

    def __post_init__(self):
        object.__setattr__(self, "blocks", _frozen_array(self.blocks))

    def __len__(self) -> int:
        return self.rows * self.cols

    def patch(self, index: int) -> Patch:
        return Patch(index // self.cols, index % self.cols, self.blocks[index])

    @property
    def patches(self) -> list[Patch]:
        return [self.patch(i) for i in range(len(self))]

    def foreground_counts(self) -> np.ndarray:
        return (~np.all(self.blocks == 0.0, axis=2)).sum(axis=1)


def load_map(path, format: str = "opm") -> OrderedPointMap:
    if format == "opm":
        return OrderedPointMap(formats.read_opm(path))
    if format == "tiff-xyz":
        return OrderedPointMap(_read_tiff_xyz(path))
    raise ValueError(f"unknown map format {format!r}")


def save_map(path, pm: OrderedPointMap) -> None:
    formats.write_opm(path, pm.points)


def _read_tiff_xyz(path) -> np.ndarray:
    try:
        import cv2
    except ImportError as exc:  # optional reader, not a declared dependency
        raise ConfigError("tiff-xyz maps need opencv-python installed") from exc
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ConfigError(f"could not decode tiff {path}")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected 3-channel xyz tiff, got shape {arr.shape}")
    arr = arr.astype(np.float32)
    arr[~np.isfinite(arr)] = 0.0
    return arr


def partition(pm: OrderedPointMap, patch_size: int = 8) -> PatchGrid:
    h, w = pm.height, pm.width
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise ValueError(f"patch size {patch_size} does not divide {h}x{w}")
    rows, cols = h // patch_size, w // patch_size
    blocks = (
        pm.points.reshape(rows, patch_size, cols, patch_size, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, patch_size * patch_size, 3)
    )
    return PatchGrid(patch_size, rows, cols, blocks)


def realign_scalars(values: np.ndarray, rows: int, cols: int) -> np.ndarray:
    values = np.asarray(values)
    if values.shape != (rows * cols,):
        raise ValueError(f"expected {rows * cols} per-patch values, got {values.shape}")
    return values.reshape(rows, cols)


def realign_blocks(blocks: np.ndarray, rows: int, cols: int, patch_size: int) -> np.ndarray:
    blocks = np.asarray(blocks)
    n, flat = blocks.shape[0], blocks.shape[1]
    if n != rows * cols or flat != patch_size * patch_size:
        raise ValueError(f"block shape {blocks.shape} does not match layout")
    trailing = blocks.shape[2:]
    return (
        blocks.reshape(rows, cols, patch_size, patch_size, *trailing)
        .transpose(0, 2, 1, 3, *range(4, 4 + len(trailing)))
        .reshape(rows * patch_size, cols * patch_size, *trailing)
    )


def realign(values: np.ndarray, grid: PatchGrid) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim == 1:
        return realign_scalars(values, grid.rows, grid.cols)
    return realign_blocks(values, grid.rows, grid.cols, grid.patch_size)


def _world_grid(h: int, w: int, extent: float):
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w * 2 * extent - extent
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h * 2 * extent - extent
    return np.meshgrid(xs, ys)


def _kind_rng(kind: str, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(kind.encode())]))


def synth_object(kind: str, params: dict | None = None, seed: int = 0) -> OrderedPointMap:
    """Deterministic synthetic surface of the given kind.

    Per-sample shape parameters are drawn from fixed ranges using the seed;
    any entry in `params` pins the corresponding draw. Common params: size
    (grid side, default 224), extent (world half-width, default 1.0), noise
    (surface z noise std, default 0).
    """
    if kind not in OBJECT_KINDS:
        raise ValueError(f"unknown object kind {kind!r}")
    p = dict(params or {})
    h = int(p.get("rows", p.get("size", 224)))
    w = int(p.get("cols", p.get("size", 224)))
    extent = float(p.get("extent", 1.0))
    noise = float(p.get("noise", 0.0))
    rng = _kind_rng(kind, seed)
    x, y = _world_grid(h, w, extent)

    # all random draws happen unconditionally and in a fixed order, so a
    # pinned parameter never shifts the remaining draws
    if kind == "wavy-plane":
        draws = {
            "half_width": rng.uniform(0.88, 0.96) * extent,
            "amplitude": rng.uniform(0.06, 0.12),
            "freq_x": rng.uniform(0.6, 1.3),
            "freq_y": rng.uniform(0.6, 1.3),
            "phase_x": rng.uniform(0.0, 2 * np.pi),
            "phase_y": rng.uniform(0.0, 2 * np.pi),
        }
        draws.update((k, float(p[k])) for k in draws if k in p)
        fg = (np.abs(x) <= draws["half_width"]) & (np.abs(y) <= draws["half_width"])
        z = draws["amplitude"] * (
            np.sin(2 * np.pi * draws["freq_x"] * x + draws["phase_x"])
            * np.cos(2 * np.pi * draws["freq_y"] * y + draws["phase_y"])
        )
    elif kind == "sphere":
        draws = {
            "cap_radius": rng.uniform(0.50, 0.62) * extent,
            "radius_ratio": rng.uniform(1.6, 2.1),
            "center_x": rng.uniform(-0.08, 0.08) * extent,
            "center_y": rng.uniform(-0.08, 0.08) * extent,
        }
        draws.update((k, float(p[k])) for k in draws if k in p)
        a = draws["cap_radius"]
        radius = float(p.get("radius", draws["radius_ratio"] * a))
        if radius < a:
            raise ValueError("sphere radius must be >= cap radius")
        dx, dy = x - draws["center_x"], y - draws["center_y"]
        r2 = dx * dx + dy * dy
        fg = r2 <= a * a
        # cap rim sits at z = 0, sphere center below the surface
        cz = -np.sqrt(radius * radius - a * a)
        z = cz + np.sqrt(np.maximum(radius * radius - r2, 0.0))
    elif kind == "cylinder":
        draws = {
            "radius": rng.uniform(0.38, 0.50) * extent,
            "half_length": rng.uniform(0.80, 0.92) * extent,
            "center_x": rng.uniform(-0.10, 0.10) * extent,
            "chord": rng.uniform(0.92, 0.985),
        }
        draws.update((k, float(p[k])) for k in draws if k in p)
        radius = draws["radius"]
        dx = x - draws["center_x"]
        fg = (np.abs(dx) <= radius * draws["chord"]) & (np.abs(y) <= draws["half_length"])
        z = np.sqrt(np.maximum(radius * radius - dx * dx, 0.0))
    else:  # box, a truncated pyramid so the silhouette stays angular
        draws = {
            "half_x": rng.uniform(0.42, 0.58) * extent,
            "half_y": rng.uniform(0.42, 0.58) * extent,
            "height": rng.uniform(0.18, 0.32),
            "taper": rng.uniform(0.30, 0.50),
        }
        draws.update((k, float(p[k])) for k in draws if k in p)
        m = np.maximum(np.abs(x) / draws["half_x"], np.abs(y) / draws["half_y"])
        fg = m <= 1.0
        z = draws["height"] * np.clip((1.0 - m) / draws["taper"], 0.0, 1.0)

    if noise > 0:
        z = z + rng.normal(0.0, noise, size=z.shape)
    pts = np.zeros((h, w, 3), dtype=np.float64)
    pts[fg, 0] = x[fg]
    pts[fg, 1] = y[fg]
    pts[fg, 2] = z[fg]
    return OrderedPointMap(pts.astype(np.float32))


def _disk_center(rng, fg: np.ndarray, radius_px: float, pinned) -> tuple[int, int]:
    if pinned is not None:
        r, c = int(pinned[0]), int(pinned[1])
        if not fg[r, c]:
            raise ValueError("pinned defect center is not a foreground pixel")
        return r, c
    rows, cols = np.nonzero(fg)
    if rows.size == 0:
        raise ValueError("map has no foreground points")
    # prefer centers whose disk is mostly on the surface; fall back after 64 draws
    for _ in range(64):
        i = int(rng.integers(rows.size))
        r, c = int(rows[i]), int(cols[i])
        rad = int(np.ceil(radius_px))
        r0, r1 = max(0, r - rad), min(fg.shape[0], r + rad + 1)
        c0, c1 = max(0, c - rad), min(fg.shape[1], c + rad + 1)
        win = fg[r0:r1, c0:c1]
        if win.mean() >= 0.7:
            return r, c
    return r, c


def inject_anomaly(
    pm: OrderedPointMap, kind: str, params: dict | None = None, seed: int = 0
) -> tuple[OrderedPointMap, np.ndarray]:
    """Apply one localized defect; returns the new map and its binary mask.

    Pixels outside the mask are bit-identical to the input. Params: radius_px
    (disk radius in pixels), amplitude (displacement scale), center (pinned
    (row, col) grid location).
    """
    if kind not in DEFECT_KINDS:
        raise ValueError(f"unknown defect kind {kind!r}")
    fg = pm.foreground_mask()
    if not fg.any():
        raise ValueError("map has no foreground points")
    p = dict(params or {})
    radius_px = float(p.get("radius_px", max(4.0, pm.height / 18.0)))
    amp = float(p.get("amplitude", 0.12))
    rng = _kind_rng(kind, seed)
    r0, c0 = _disk_center(rng, fg, radius_px, p.get("center"))

    rr, cc = np.meshgrid(np.arange(pm.height), np.arange(pm.width), indexing="ij")
    dist = np.sqrt((rr - r0) ** 2 + (cc - c0) ** 2)
    mask = (dist <= radius_px) & fg

    pts = pm.points.astype(np.float64)
    sel = pts[mask]
    if kind in ("bump", "dent"):
        # one shared normal for the disk, from the plane fit of its points
        centered = sel - sel.mean(axis=0)
        _, vecs = np.linalg.eigh(centered.T @ centered)
        normal = vecs[:, 0]
        if normal[2] < 0:
            normal = -normal
        profile = amp * np.cos(np.pi * dist[mask] / (2 * radius_px)) ** 2
        sign = 1.0 if kind == "bump" else -1.0
        pts[mask] = sel + sign * profile[:, None] * normal
    elif kind == "blob-add":
        # foreign material: scattered points floating above the local surface
        top = sel[:, 2].max()
        lift = amp * (0.25 + 0.75 * rng.random(sel.shape[0]))
        pitch = 2.0 / pm.width
        jitter = rng.uniform(-0.5, 0.5, size=(sel.shape[0], 2)) * pitch
        pts[mask, 0] = sel[:, 0] + jitter[:, 0]
        pts[mask, 1] = sel[:, 1] + jitter[:, 1]
        pts[mask, 2] = top + lift
    else:  # hole
        pts[mask] = 0.0

    out = pm.points.copy()
    out[mask] = pts[mask].astype(np.float32)
    return OrderedPointMap(out), mask.astype(np.uint8)


@dataclass(frozen=True)
class ManifestEntry:
    role: str
    class_label: str
    path: str
    gt_path: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown manifest role {self.role!r}")


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int = 0

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        test = {e.class_label for e in entries if e.role.startswith("test")}
        for e in entries:
            if e.role == "task-irrelevant" and e.class_label in test:
                raise ConfigError(
                    f"task-irrelevant class {e.class_label!r} matches a test class"
                )

    def select(self, role: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == role]

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "entries": [
                {"role": e.role, "class": e.class_label, "path": e.path, "gt": e.gt_path}
                for e in self.entries
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        payload = json.loads(text)
        entries = tuple(
            ManifestEntry(e["role"], e["class"], e["path"], e.get("gt"))
            for e in payload["entries"]
        )
        return DatasetManifest(entries, int(payload.get("seed", 0)))

    @staticmethod
    def load(path) -> "DatasetManifest":
        return DatasetManifest.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")
