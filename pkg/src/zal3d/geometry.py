"""KD-tree search, surface normals, and FPFH descriptors.

FPFH follows the standard construction: per-point SPFH histograms of the
angular pair features (alpha, phi, theta) over a k-neighborhood, then
FPFH(p) = SPFH(p) + (1/k) sum_j SPFH(q_j) / dist(p, q_j). Descriptors are
33-dimensional (three 11-bin blocks, order alpha | phi | theta), each block
normalized to sum 1. Patch descriptors average the per-point FPFH of the
patch's foreground points and renormalize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

FPFH_BINS = 11
FPFH_DIM = 3 * FPFH_BINS
DEFAULT_K = 16


class KdTree:
    """Exact 3D nearest-neighbor index; ties broken by smaller original index."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (n, 3) points, got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("cannot build tree over zero points")
        if not np.isfinite(pts).all():
            raise ValueError("points contain NaN or Inf")
        self.points = pts.copy()
        self.points.flags.writeable = False
        self._tree = cKDTree(self.points, balanced_tree=True)

    def __len__(self) -> int:
        return len(self.points)

    def knn_batch(self, queries, k: int):
        """k nearest per query row; returns (indices, distances), each (m, k)."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} outside [1, {n}]")
        dist, idx = self._tree.query(q, k=k)
        dist = dist.reshape(len(q), k)
        idx = idx.reshape(len(q), k)
        # re-rank candidates within an epsilon ball of the k-th distance so
        # equal distances always resolve to the smaller original index
        radii = dist[:, -1] * (1.0 + 1e-9)
        balls = self._tree.query_ball_point(q, radii)
        out_idx = np.empty((len(q), k), dtype=np.int64)
        out_dist = np.empty((len(q), k), dtype=np.float64)
        for i, cand in enumerate(balls):
            cand = np.asarray(cand, dtype=np.int64)
            if cand.size < k:  # degenerate ball radius (all-zero distances)
                cand = idx[i]
            diff = self.points[cand] - q[i]
            d2 = np.einsum("ij,ij->i", diff, diff)
            order = np.lexsort((cand, d2))[:k]
            out_idx[i] = cand[order]
            out_dist[i] = np.sqrt(d2[order])
        return out_idx, out_dist

    def knn(self, query, k: int) -> list[tuple[int, float]]:
        idx, dist = self.knn_batch(np.asarray(query, dtype=np.float64)[None, :], k)
        return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


def build_kdtree(points) -> KdTree:
    return KdTree(points)


@dataclass(frozen=True)
class NormalField:
    normals: np.ndarray     # (n, 3) unit vectors, oriented toward +z
    degenerate: np.ndarray  # (n,) bool, collinear neighborhoods


def _normals_from_neighborhoods(points: np.ndarray, hood_idx: np.ndarray) -> NormalField:
    hoods = points[hood_idx]  # (n, k+1, 3)
    centered = hoods - hoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    vals, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0].copy()
    # collinear neighborhood: two vanishing eigenvalues, normal undefined
    degenerate = vals[:, 1] <= 1e-9 * np.maximum(vals[:, 2], 1e-30)
    normals[degenerate] = (0.0, 0.0, 1.0)
    flip = normals[:, 2] < 0.0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return NormalField(normals, degenerate)


def estimate_normals(points, k_neighbors: int = DEFAULT_K) -> NormalField:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < k_neighbors + 1:
        raise ValueError(f"need at least {k_neighbors + 1} points")
    tree = KdTree(pts)
    hood_idx, _ = tree.knn_batch(pts, k_neighbors + 1)
    return _normals_from_neighborhoods(tree.points, hood_idx)


def _drop_self(idx: np.ndarray, dist: np.ndarray):
    """Remove each row's own index from its (k+1)-neighborhood, keep k entries."""
    n, kp1 = idx.shape
    rows = np.arange(n)
    self_hit = idx == rows[:, None]
    drop_col = np.where(self_hit.any(axis=1), self_hit.argmax(axis=1), kp1 - 1)
    keep = np.ones_like(idx, dtype=bool)
    keep[rows, drop_col] = False
    return idx[keep].reshape(n, kp1 - 1), dist[keep].reshape(n, kp1 - 1)


def _pair_features(p_i, n_i, p_j, n_j):
    """Angular features (alpha, phi, theta) with source/target selection.

    The pair member whose normal is better aligned with the connecting line
    acts as source. Returns a validity mask for degenerate pairs (zero
    separation or normal parallel to the line).
    """
    d = p_j - p_i
    dn = np.linalg.norm(d, axis=-1)
    valid = dn > 1e-12
    dn_safe = np.where(valid, dn, 1.0)
    dhat = d / dn_safe[..., None]
    a1 = np.einsum("...i,...i->...", n_i, dhat)
    a2 = np.einsum("...i,...i->...", n_j, dhat)
    swap = np.abs(a1) < np.abs(a2)
    n_s = np.where(swap[..., None], n_j, n_i)
    n_t = np.where(swap[..., None], n_i, n_j)
    d_st = np.where(swap[..., None], -dhat, dhat)
    phi = np.einsum("...i,...i->...", n_s, d_st)
    v = np.cross(d_st, n_s)
    vn = np.linalg.norm(v, axis=-1)
    valid &= vn > 1e-12
    v = v / np.where(valid, vn, 1.0)[..., None]
    w = np.cross(n_s, v)
    alpha = np.einsum("...i,...i->...", v, n_t)
    theta = np.arctan2(
        np.einsum("...i,...i->...", w, n_t), np.einsum("...i,...i->...", n_s, n_t)
    )
    return alpha, phi, theta, valid


def _bin_feature(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    b = np.floor((x - lo) / (hi - lo) * FPFH_BINS).astype(np.int64)
    return np.clip(b, 0, FPFH_BINS - 1)


def _spfh(points, normals, nbr_idx):
    n, k = nbr_idx.shape
    p_i = points[:, None, :]
    n_i = normals[:, None, :]
    p_j = points[nbr_idx]
    n_j = normals[nbr_idx]
    alpha, phi, theta, valid = _pair_features(p_i, n_i, p_j, n_j)
    hist = np.zeros((n, FPFH_DIM), dtype=np.float64)
    rows = np.broadcast_to(np.arange(n)[:, None], (n, k))[valid]
    np.add.at(hist, (rows, _bin_feature(alpha[valid], -1.0, 1.0)), 1.0)
    np.add.at(hist, (rows, FPFH_BINS + _bin_feature(phi[valid], -1.0, 1.0)), 1.0)
    np.add.at(hist, (rows, 2 * FPFH_BINS + _bin_feature(theta[valid], -np.pi, np.pi)), 1.0)
    return hist / k


def _normalize_blocks(desc: np.ndarray) -> np.ndarray:
    out = desc.reshape(*desc.shape[:-1], 3, FPFH_BINS)
    sums = out.sum(axis=-1, keepdims=True)
    out = np.where(sums > 0, out / np.where(sums > 0, sums, 1.0), 0.0)
    return out.reshape(desc.shape)


def fpfh_per_point(points, normals, k_neighbors: int = DEFAULT_K, hood=None) -> np.ndarray:
    """Block-normalized (n, 33) FPFH; `hood` reuses a (k+1)-NN query (idx, dist)."""
    pts = np.asarray(points, dtype=np.float64)
    nrm = np.asarray(normals, dtype=np.float64)
    if hood is None:
        tree = KdTree(pts)
        hood = tree.knn_batch(pts, k_neighbors + 1)
    nbr_idx, nbr_dist = _drop_self(*hood)
    spfh = _spfh(pts, nrm, nbr_idx)
    weights = 1.0 / np.maximum(nbr_dist, 1e-12)
    fpfh = spfh + (weights[:, :, None] * spfh[nbr_idx]).sum(axis=1) / nbr_idx.shape[1]
    return _normalize_blocks(fpfh)


@dataclass(frozen=True)
class FpfhDescriptor:
    values: np.ndarray  # (33,)
    degenerate: bool


def aggregate_patch(per_point_fpfh: np.ndarray, member_idx: np.ndarray) -> FpfhDescriptor:
    member_idx = np.asarray(member_idx, dtype=np.int64)
    if member_idx.size == 0:
        return FpfhDescriptor(np.zeros(FPFH_DIM), True)
    mean = per_point_fpfh[member_idx].mean(axis=0)
    return FpfhDescriptor(_normalize_blocks(mean), False)


def fpfh_patch(points, normals, member_idx, k_neighbors: int = DEFAULT_K) -> FpfhDescriptor:
    return aggregate_patch(fpfh_per_point(points, normals, k_neighbors), member_idx)


def map_fpfh(pm, patch_size: int = 8, k_neighbors: int = DEFAULT_K):
    """Per-patch FPFH over a point map.

    Returns (descriptors (P, 33), degenerate (P,) bool) with P patches in
    row-major order; patches without foreground points are flagged and zero.
    """
    fg = pm.foreground_mask()
    rows, cols = np.nonzero(fg)
    n_rows, n_cols = pm.height // patch_size, pm.width // patch_size
    n_patches = n_rows * n_cols
    desc = np.zeros((n_patches, FPFH_DIM), dtype=np.float64)
    degenerate = np.ones(n_patches, dtype=bool)
    pts = pm.points[fg].astype(np.float64)
    if len(pts) < k_neighbors + 2:
        return desc, degenerate
    tree = KdTree(pts)
    hood = tree.knn_batch(pts, k_neighbors + 1)
    normals = _normals_from_neighborhoods(tree.points, hood[0])
    per_point = fpfh_per_point(pts, normals.normals, k_neighbors, hood=hood)
    patch_of_point = (rows // patch_size) * n_cols + (cols // patch_size)
    counts = np.bincount(patch_of_point, minlength=n_patches)
    sums = np.zeros((n_patches, FPFH_DIM), dtype=np.float64)
    np.add.at(sums, patch_of_point, per_point)
    nonzero = counts > 0
    desc[nonzero] = _normalize_blocks(sums[nonzero] / counts[nonzero, None])
    degenerate = ~nonzero
    return desc, degenerate
