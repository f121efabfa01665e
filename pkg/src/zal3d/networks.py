"""Trainable point-set networks, losses, training loop, input gradients.

Both the feature encoder and the normalcy classifier share one body: two
radius-grouped set-abstraction stages (per-pair transforms max-pooled over
each point's neighborhood) followed by a global max-pool and a 2-layer head.
Every reduction is a max over per-point or per-pair values, so the outputs
are exactly permutation invariant. Patches are centered before they reach a
network; scale is normalized inside the forward pass by the largest point
norm, which keeps the grouping radii meaningful across objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import formats
from .errors import ConfigError, TrainingError
from .geometry import FPFH_DIM

FEATURE_DIM = 32
PATCH_POINTS = 64


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    w_con: float = 1.0
    w_rd: float = 100.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.w_con < 0 or self.w_rd < 0:
            raise ConfigError("loss weights must be non-negative")


class PointSetBody(nn.Module):
    def __init__(self, widths=(32, 64), radii=(0.1, 0.25)):
        super().__init__()
        w1, w2 = widths
        self.r1, self.r2 = radii
        self.pair1 = nn.Linear(3, w1)
        self.point1 = nn.Linear(w1, w1)
        self.pair2_off = nn.Linear(3, w2)
        self.pair2_feat = nn.Linear(w1, w2, bias=False)
        self.point2 = nn.Linear(w2, w2)

    def forward(self, x):  # (B, n, 3) centered patches
        scale = x.norm(dim=2).amax(dim=1, keepdim=True)
        x = x / (scale[:, :, None] + 1e-9)
        diff = x[:, None, :, :] - x[:, :, None, :]  # [b, i, j] = x_j - x_i
        dist = diff.norm(dim=3)
        neg_inf = torch.finfo(x.dtype).min
        u = F.relu(self.pair1(diff))
        u = u.masked_fill((dist > self.r1)[..., None], neg_inf)
        v = F.relu(self.point1(u.amax(dim=2)))  # self-pairs keep every row finite
        e = F.relu(self.pair2_off(diff) + self.pair2_feat(v)[:, None, :, :])
        e = e.masked_fill((dist > self.r2)[..., None], neg_inf)
        g = self.point2(e.amax(dim=2))
        return g.amax(dim=1)  # (B, w2)


class PointEncoder(nn.Module):
    """64 points -> 32-dimensional feature, exactly permutation invariant."""

    def __init__(self, widths=(32, 64), radii=(0.1, 0.25), out_dim=FEATURE_DIM):
        super().__init__()
        self.body = PointSetBody(widths, radii)
        w2 = widths[1]
        self.head = nn.Sequential(nn.Linear(w2, w2), nn.ReLU(), nn.Linear(w2, out_dim))

    def forward(self, x):
        return self.head(self.body(x))


class PointClassifier(nn.Module):
    """64 points -> 2 class logits (class 1 = pseudo-abnormal)."""

    def __init__(self, widths=(32, 64), radii=(0.1, 0.25)):
        super().__init__()
        self.body = PointSetBody(widths, radii)
        w2 = widths[1]
        self.head = nn.Sequential(nn.Linear(w2, w2), nn.ReLU(), nn.Linear(w2, 2))

    def forward(self, x):
        return self.head(self.body(x))


def center_patch(points: np.ndarray) -> np.ndarray:
    """Subtract the centroid of the non-sentinel points from every point."""
    pts = np.asarray(points, dtype=np.float64)
    fg = ~np.all(pts == 0.0, axis=-1)
    if pts.ndim == 2:
        return pts - pts[fg].mean(axis=0) if fg.any() else pts.copy()
    out = pts.copy()
    for b in range(len(pts)):
        if fg[b].any():
            out[b] -= pts[b][fg[b]].mean(axis=0)
    return out


def _as_batch(points, dtype=torch.float32):
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    if pts.shape[1:] != (PATCH_POINTS, 3):
        raise ValueError(f"expected (*, {PATCH_POINTS}, 3) points, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("patch contains non-finite coordinates")
    return torch.from_numpy(pts).to(dtype), single


def encode(encoder: PointEncoder, points) -> np.ndarray:
    dtype = next(encoder.parameters()).dtype
    batch, single = _as_batch(points, dtype)
    with torch.no_grad():
        out = encoder(batch).numpy()
    return out[0] if single else out


def classify(classifier: PointClassifier, points):
    """Probability of class 1, clamped to the open interval (0, 1)."""
    dtype = next(classifier.parameters()).dtype
    batch, single = _as_batch(points, dtype)
    with torch.no_grad():
        logits = classifier(batch)
        p = torch.sigmoid(logits[:, 1] - logits[:, 0])
        p = torch.clamp(p, 1e-7, 1 - 1e-7).numpy()
    return float(p[0]) if single else p


def _normalize_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError(f"zero-norm {what} feature: cosine undefined")
    return x / norms


def loss_con(anchors, positives, negatives, temperature: float, positive_mask=None):
    """Contrastive loss, denominator over negatives only.

    Sum over anchors of the mean over that anchor's positives of
    -log( exp(cos(a, p)/T) / sum_n exp(cos(a, n)/T) ). With anchors equal to
    positives, pass `positive_mask` to exclude self-pairs; the value can be
    negative because positive terms never enter the denominator.
    """
    a = _normalize_rows(torch.atleast_2d(torch.as_tensor(anchors)), "anchor")
    p = _normalize_rows(torch.atleast_2d(torch.as_tensor(positives)), "positive")
    n = _normalize_rows(torch.atleast_2d(torch.as_tensor(negatives)), "negative")
    sim_ap = (a @ p.T) / temperature
    sim_an = (a @ n.T) / temperature
    lse = torch.logsumexp(sim_an, dim=1, keepdim=True)
    terms = lse - sim_ap  # (A, P)
    if positive_mask is None:
        per_anchor = terms.mean(dim=1)
    else:
        mask = torch.as_tensor(positive_mask, dtype=terms.dtype)
        counts = mask.sum(dim=1)
        if (counts == 0).any():
            raise ValueError("every anchor needs at least one positive")
        per_anchor = (terms * mask).sum(dim=1) / counts
    return per_anchor.sum()


def rd_projection(seed: int = 0) -> np.ndarray:
    """Fixed orthonormal 33 -> 32 map aligning FPFH with the learned space."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x52445052]))
    q, r = np.linalg.qr(rng.standard_normal((FPFH_DIM, FPFH_DIM)))
    q = q * np.sign(np.diag(r))  # unique orientation
    return q[:, :FEATURE_DIM]


def loss_rd(fpfh, learned, projection=None) -> torch.Tensor:
    """Cosine similarity between projected FPFH and the learned feature;
    minimizing it pushes the two representations apart."""
    le = torch.atleast_2d(torch.as_tensor(learned) if not torch.is_tensor(learned) else learned)
    f = torch.atleast_2d(torch.as_tensor(fpfh)).to(le.dtype)
    if projection is None:
        projection = rd_projection()
    proj = torch.as_tensor(projection, dtype=le.dtype)
    aligned = f @ proj
    a = _normalize_rows(aligned, "projected fpfh")
    b = _normalize_rows(le, "learned")
    return (a * b).sum(dim=1).mean()


def loss_bce(probs, labels) -> torch.Tensor:
    p = torch.as_tensor(probs)
    y = torch.as_tensor(labels, dtype=p.dtype)
    if p.numel() == 0:
        raise ValueError("empty batch")
    p = torch.clamp(p, 1e-7, 1 - 1e-7)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def total_encoder_loss(l_con, l_rd, cfg: LossConfig):
    return cfg.w_con * l_con + cfg.w_rd * l_rd


def classifier_prob(classifier, batch: torch.Tensor) -> torch.Tensor:
    logits = classifier(batch)
    return torch.sigmoid(logits[:, 1] - logits[:, 0])


def input_grad(classifier: PointClassifier, points) -> np.ndarray:
    """Gradient of -log max(p, 1-p) with respect to the input coordinates;
    a tie at p = 0.5 follows the class-1 branch."""
    dtype = next(classifier.parameters()).dtype
    batch, single = _as_batch(points, dtype)
    batch.requires_grad_(True)
    logits = classifier(batch)
    delta = logits[:, 1] - logits[:, 0]
    branch = torch.where(delta >= 0, delta, -delta)
    loss = -F.logsigmoid(branch).sum()
    (grad,) = torch.autograd.grad(loss, batch)
    grad = grad.detach().numpy().astype(np.float64)
    if not np.isfinite(grad).all():
        raise ValueError("non-finite input gradient")
    return grad[0] if single else grad


def train(
    stream,
    cfg: LossConfig,
    seed: int,
    fpfh_of=None,
    epochs: int = 5,
    lr: float = 1e-3,
    positives_per_batch: int = 4,
    widths=(32, 64),
    radii=(0.1, 0.25),
    center: bool = True,
    max_positives: int | None = None,
):
    """Train encoder and classifier jointly over the labeled patch stream.

    The stream interleaves each positive with its 16 negatives; every batch
    holds `positives_per_batch` positives plus their negatives, so the 16:1
    ratio holds in every step. `fpfh_of(provenance)` supplies the positive
    patch's map-context FPFH for the redundancy term (required if w_rd > 0).
    Returns (encoder, classifier, per-step loss log).
    """
    if cfg.w_rd > 0 and fpfh_of is None:
        raise ConfigError("w_rd > 0 requires an fpfh lookup")
    if positives_per_batch < 2:
        raise ConfigError("need at least 2 positives per batch for contrast")
    groups = []  # (positive, [16 negatives])
    for patch in stream:
        if patch.label == 0:
            if max_positives is not None and len(groups) == max_positives:
                break
            groups.append((patch, []))
        elif groups:
            groups[-1][1].append(patch)
        else:
            raise TrainingError("stream must start with a positive patch")
    if not groups:
        raise TrainingError("empty training stream")

    torch.manual_seed(int(seed))
    encoder = PointEncoder(widths, radii)
    classifier = PointClassifier(widths, radii)
    opt_e = torch.optim.Adam(encoder.parameters(), lr=lr)
    opt_c = torch.optim.Adam(classifier.parameters(), lr=lr)
    projection = torch.from_numpy(rd_projection()).float()

    def prep(patches):
        pts = np.stack([p.points for p in patches])
        if center:
            pts = center_patch(pts)
        return torch.from_numpy(pts).float()

    fpfh_cache = [
        np.asarray(fpfh_of(g[0].provenance), dtype=np.float64) if fpfh_of else None
        for g in groups
    ]
    rng = np.random.default_rng(int(seed))
    log = []
    n_batches = len(groups) // positives_per_batch
    if n_batches == 0:
        raise TrainingError(
            f"{len(groups)} positives cannot fill a batch of {positives_per_batch}"
        )
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(groups))
        for step in range(n_batches):
            take = order[step * positives_per_batch : (step + 1) * positives_per_batch]
            pos = [groups[i][0] for i in take]
            neg = [p for i in take for p in groups[i][1]]
            pos_batch = prep(pos)
            neg_batch = prep(neg)

            pos_feat = encoder(pos_batch)
            neg_feat = encoder(neg_batch)
            mask = 1.0 - torch.eye(len(pos))
            l_con = loss_con(pos_feat, pos_feat, neg_feat, cfg.temperature, mask)
            if cfg.w_rd > 0:
                fpfh = torch.from_numpy(np.stack([fpfh_cache[i] for i in take])).float()
                l_rd = loss_rd(fpfh, pos_feat, projection)
            else:
                l_rd = torch.zeros(())
            total = total_encoder_loss(l_con, l_rd, cfg)
            opt_e.zero_grad()
            total.backward()
            opt_e.step()

            both = torch.cat([pos_batch, neg_batch])
            labels = torch.cat([torch.zeros(len(pos)), torch.ones(len(neg))])
            probs = classifier_prob(classifier, both)
            l_bce = loss_bce(probs, labels)
            opt_c.zero_grad()
            l_bce.backward()
            opt_c.step()

            row = {
                "epoch": epoch,
                "step": step,
                "l_con": float(l_con.detach()),
                "l_rd": float(l_rd.detach()),
                "l_bce": float(l_bce.detach()),
                "total": float(total.detach()),
            }
            if not all(np.isfinite(v) for v in row.values()):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}")
            log.append(row)
    return encoder, classifier, log


def state_tensors(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        prefix + name: tensor.detach().numpy()
        for name, tensor in module.state_dict().items()
    }


def load_state_tensors(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str):
    state = {
        name[len(prefix):]: torch.from_numpy(np.ascontiguousarray(arr))
        for name, arr in tensors.items()
        if name.startswith(prefix)
    }
    module.load_state_dict(state)
    return module


def save_checkpoint(path, encoder: PointEncoder, classifier: PointClassifier):
    tensors = state_tensors(encoder, "encoder.")
    tensors.update(state_tensors(classifier, "classifier."))
    formats.write_tensors(path, tensors)


def load_checkpoint(path, widths=(32, 64), radii=(0.1, 0.25)):
    tensors = formats.read_tensors(path)
    encoder = load_state_tensors(PointEncoder(widths, radii), tensors, "encoder.")
    classifier = load_state_tensors(PointClassifier(widths, radii), tensors, "classifier.")
    encoder.eval()
    classifier.eval()
    return encoder, classifier
