"""Random small instances for finite-difference gradient checks (float64)."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from oodseg.data import IGNORE
from oodseg.losses import (
    ClassWeights,
    ContrastiveConfig,
    bce_ood_loss,
    kl_flat_loss,
    label_noise_mask,
    max_softmax_uncertainty,
    oodcon_loss,
    supcon_loss,
    weighted_cross_entropy,
)

from oracles import central_difference

REL_TOL = 1e-4
INSTANCES = 20


def _supcon(rng):
    n, d = int(rng.integers(4, 9)), int(rng.integers(3, 6))
    labels = rng.integers(0, 3, n)
    labels[:2] = labels[0]  # at least one anchor with a positive
    cfg = ContrastiveConfig(temperature=float(rng.uniform(0.2, 1.0)))
    return lambda x: supcon_loss(F.normalize(x, dim=1), labels, cfg).value, rng.normal(size=(n, d))


def _oodcon(rng):
    n, d = int(rng.integers(5, 10)), int(rng.integers(3, 6))
    labels = (rng.random(n) < 0.5).astype(int)
    labels[:2] = 0
    labels[2] = 1
    cfg = ContrastiveConfig(temperature=float(rng.uniform(0.2, 1.0)), rejection_ratio=0.4)
    x0 = rng.normal(size=(n, d))
    # the mask is piecewise constant; freeze it at x0 so f is smooth
    mask = label_noise_mask(F.normalize(torch.from_numpy(x0), dim=1), labels, cfg.rejection_ratio)
    return lambda x: oodcon_loss(F.normalize(x, dim=1), labels, cfg, mask=mask).value, x0


def _weighted_ce(rng):
    b, k, h, w = 2, int(rng.integers(2, 5)), 3, 4
    seg = rng.integers(0, k, (b, h, w))
    seg[rng.random((b, h, w)) < 0.25] = IGNORE
    seg[0, 0, 0] = 0
    weights = ClassWeights(rng.uniform(0.5, 3.0, k))
    return lambda x: weighted_cross_entropy(x, seg, weights).value, rng.normal(size=(b, k, h, w))


def _bce(rng):
    labels = (rng.random((1, 4, 5)) < 0.4).astype(np.uint8)
    return lambda x: bce_ood_loss(x, labels).value, rng.uniform(0.05, 0.95, (1, 4, 5))


def _kl(rng):
    k = int(rng.integers(2, 5))
    labels = (rng.random((3, 4)) < 0.5).astype(np.uint8)
    labels[0, 0] = 1
    return lambda x: kl_flat_loss(x, labels).value, rng.normal(size=(k, 3, 4))


def _max_softmax(rng):
    k = int(rng.integers(2, 5))
    probe = torch.from_numpy(rng.normal(size=(1, 3, 3)))
    return lambda x: (max_softmax_uncertainty(x) * probe).sum(), rng.normal(size=(k, 3, 3))


CASES = {
    "supcon_loss": _supcon,
    "oodcon_loss": _oodcon,
    "weighted_cross_entropy": _weighted_ce,
    "bce_ood_loss": _bce,
    "kl_flat_loss": _kl,
    "max_softmax_uncertainty": _max_softmax,
}


def relative_gradient_error(name: str, seed: int) -> float:
    """max-norm relative error between autograd and central differences."""
    f, x0 = CASES[name](np.random.default_rng([seed, len(name)]))
    x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    f(x).backward()
    analytic = x.grad.numpy()
    numeric = central_difference(lambda a: float(f(torch.from_numpy(a))), x0)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
