"""Training objectives and the max-softmax uncertainty score.

All functions are pure and dtype-agnostic, so the gradient tests can run
them in float64. Contrastive losses take projected (usually unit-norm)
vectors together with their labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import IGNORE, ClassFrequency

PROB_EPS = 1e-7
ENET_C = 1.02


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    rejection_ratio: float = 0.2
    normalize_projections: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.rejection_ratio < 1:
            raise ValueError("rejection_ratio must lie in [0, 1)")


@dataclass
class LossValue:
    value: torch.Tensor
    diagnostics: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())


@dataclass(frozen=True)
class ClassWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if not (np.isfinite(w).all() and (w > 0).all()):
            raise ValueError("class weights must be finite and positive")
        object.__setattr__(self, "w", w)


def _as_long(labels, device) -> torch.Tensor:
    return torch.as_tensor(np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels),
                           dtype=torch.long, device=device)


def _zero(like: torch.Tensor) -> torch.Tensor:
    # keeps the autograd graph connected when a loss is vacuous
    return like.sum() * 0.0


def _reduce(total: torch.Tensor, count: int, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / max(count, 1)
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# Contrastive objectives


def supcon_loss(projections: torch.Tensor, labels, cfg: ContrastiveConfig, reduction: str = "mean") -> LossValue:
    """Supervised contrastive loss over a batch of projected vectors.

    Each anchor's summed positive terms are weighted by 1/(N_y - 1); anchors
    whose class is a singleton have no positives and are skipped. ``"sum"``
    returns the literal total, ``"mean"`` divides by the anchors used.
    """
    n = projections.shape[0]
    if n < 2:
        raise ValueError("supcon_loss needs at least 2 vectors")
    y = _as_long(labels, projections.device)
    eye = torch.eye(n, dtype=torch.bool, device=projections.device)
    sim = projections @ projections.T / cfg.temperature
    log_denom = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1)
    pos = (y[:, None] == y[None, :]) & ~eye
    n_pos = pos.sum(dim=1)
    valid = n_pos > 0
    diag = {"num_anchors": int(valid.sum()), "num_vectors": n}
    if not valid.any():
        diag["note"] = "no anchor has a positive"
        return LossValue(_zero(projections), diag)
    per_pair = (log_denom[:, None] - sim) * pos
    per_anchor = per_pair.sum(dim=1)[valid] / n_pos[valid]
    return LossValue(_reduce(per_anchor.sum(), int(valid.sum()), reduction), diag)


def label_noise_mask(projections: torch.Tensor, labels, rejection_ratio: float) -> torch.Tensor:
    """Mask (1 = keep) rejecting the ⌊R·N_ood⌋ OoD vectors most similar to in-dist.

    An OoD vector's score is its maximum dot product with any in-dist vector.
    Ties are broken towards the lower index. In-dist entries are always kept.
    """
    y = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels).astype(np.int64)
    mask = torch.ones(len(y), dtype=torch.bool, device=projections.device)
    ood = np.flatnonzero(y == 1)
    ind = np.flatnonzero(y == 0)
    if ood.size == 0:
        return mask
    if ind.size == 0:
        raise ValueError("label-noise mask undefined: OoD vectors present but no in-dist vectors")
    k = int(math.floor(rejection_ratio * ood.size + 1e-9))
    if k == 0:
        return mask
    z = projections.detach()
    scores = (z[ood] @ z[ind].T).max(dim=1).values.cpu().double().numpy()
    order = np.lexsort((np.arange(ood.size), -scores))
    mask[torch.as_tensor(ood[order[:k]], device=projections.device)] = False
    return mask


def oodcon_loss(
    projections: torch.Tensor,
    labels,
    cfg: ContrastiveConfig,
    reduction: str = "mean",
    mask: torch.Tensor | None = None,
) -> LossValue:
    """One-class contrastive loss: in-dist anchors and positives, OoD as maskable negatives."""
    n = projections.shape[0]
    y = _as_long(labels, projections.device)
    ind = y == 0
    n_id = int(ind.sum())
    if n_id < 2:
        raise ValueError(f"oodcon_loss needs at least 2 in-distribution vectors, got {n_id}")
    if mask is None:
        mask = label_noise_mask(projections, y, cfg.rejection_ratio)
    keep = mask.to(torch.bool) | ind

    eye = torch.eye(n, dtype=torch.bool, device=projections.device)
    sim = projections @ projections.T / cfg.temperature
    a = ind.nonzero(as_tuple=True)[0]
    sim_a = sim[a]
    denom_ok = keep[None, :] & ~eye[a]
    log_denom = torch.logsumexp(sim_a.masked_fill(~denom_ok, float("-inf")), dim=1)
    pos = ind[None, :] & ~eye[a]
    per_anchor = ((log_denom[:, None] - sim_a) * pos).sum(dim=1) / (n_id - 1)

    with torch.no_grad():
        raw = projections @ projections.T
        neg = (y == 1) & keep
        diag = {
            "num_anchors": n_id,
            "num_ood": int((y == 1).sum()),
            "num_masked_ood": int(((y == 1) & ~keep).sum()),
            "mean_pos_sim": float(raw[a][pos].mean()) if pos.any() else float("nan"),
            "mean_neg_sim": float(raw[a][:, neg].mean()) if neg.any() else float("nan"),
        }
    return LossValue(_reduce(per_anchor.sum(), n_id, reduction), diag)


# ---------------------------------------------------------------------------
# Pixel-wise objectives


def enet_class_weights(freq: ClassFrequency, c: float = ENET_C) -> ClassWeights:
    p = np.asarray(freq.per_class_pixel_fraction, dtype=np.float64)
    return ClassWeights(1.0 / np.log(c + p))


def weighted_cross_entropy(logits: torch.Tensor, seg_labels, weights: ClassWeights) -> LossValue:
    """Mean over labelled pixels of w_y · (−log softmax_y); IGNORE pixels are skipped."""
    labels = _as_long(seg_labels, logits.device)
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ValueError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    valid = labels != IGNORE
    count = int(valid.sum())
    if count == 0:
        return LossValue(_zero(logits), {"num_pixels": 0, "note": "all pixels IGNORE"})
    logp = F.log_softmax(logits, dim=-3)
    safe = labels.masked_fill(~valid, 0)
    picked = logp.gather(-3, safe.unsqueeze(-3)).squeeze(-3)
    w = torch.as_tensor(weights.w, dtype=logits.dtype, device=logits.device)[safe]
    nll = -picked.clamp(min=math.log(PROB_EPS))
    return LossValue((w * nll)[valid].sum() / count, {"num_pixels": count})


def bce_ood_loss(scores: torch.Tensor, ood_labels) -> LossValue:
    """Mean binary cross-entropy between OoD scores and binary labels."""
    target = torch.as_tensor(
        np.asarray(ood_labels.cpu() if isinstance(ood_labels, torch.Tensor) else ood_labels),
        dtype=scores.dtype, device=scores.device,
    ).reshape(scores.shape)
    s = scores.clamp(PROB_EPS, 1.0 - PROB_EPS)
    bce = -(target * torch.log(s) + (1 - target) * torch.log1p(-s))
    return LossValue(bce.mean(), {"num_pixels": int(target.numel())})


def kl_flat_loss(logits: torch.Tensor, ood_labels) -> LossValue:
    """Mean over OoD pixels of KL(uniform ‖ softmax(logits))."""
    ood = _as_long(ood_labels, logits.device) == 1
    count = int(ood.sum())
    if count == 0:
        return LossValue(_zero(logits), {"num_pixels": 0})
    k = logits.shape[-3]
    logp = F.log_softmax(logits, dim=-3)
    kl = -math.log(k) - logp.mean(dim=-3)
    return LossValue(kl[ood].sum() / count, {"num_pixels": count})


def max_softmax_uncertainty(logits: torch.Tensor) -> torch.Tensor:
    """1 − max softmax probability, with the class axis kept as a singleton."""
    return 1.0 - F.softmax(logits, dim=-3).max(dim=-3, keepdim=True).values
