"""Worst-case adaptive l-inf m-sharpness with logit-normalized loss.

For each batch of size ``m`` drawn from a seeded training subset, the loss
increase ``max L(w + eps) - L(w)`` is maximized over the box
``|eps_i| <= rho * |w_i|``. ``steps == 1`` takes a single projected
sign-gradient step; more steps run a momentum PGD with step halving.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import STREAM_SHARPNESS, make_rng

MOMENTUM = 0.75
PATIENCE = 3


@dataclass
class SharpnessConfig:
    rho: float
    m: int = 128
    subset_size: int = 2048
    steps: int = 20
    seed: int = 0

    def validate(self):
        if self.rho < 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.m < 1 or self.subset_size < self.m:
            raise ValueError(f"need 1 <= m <= subset_size, got m={self.m}, subset={self.subset_size}")
        return self


@dataclass
class SharpnessReport:
    rho: float
    m: int
    subset_size: int
    steps: int
    s_w_m: float
    per_batch: list = field(default_factory=list)
    seed: int = 0

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def project_linf_adaptive(eps_candidate, w, rho):
    """Clamp to ``[-rho |w_i|, rho |w_i|]``; coordinates with ``w_i == 0`` become 0."""
    bound = rho * np.abs(w)
    out = np.clip(eps_candidate, -bound, bound)
    return np.where(bound > 0, out, 0.0)


def maximize_box(fun, w, rho, steps):
    """Maximize ``fun`` over the adaptive box around ``eps = 0``.

    ``fun(eps, need_grad)`` returns ``(loss, grad or None)``. Returns
    ``(baseline, best_loss, best_eps)``. The first iterate is the single
    projected sign step, and ``eps = 0`` is always a candidate.
    """
    zero = np.zeros_like(w)
    base, g = fun(zero, True)
    best, best_eps = base, zero
    if rho == 0:
        return base, best, best_eps
    scale = np.abs(w)
    step = rho
    eps_prev = eps = zero
    since_improve = 0
    for k in range(1, steps + 1):
        z = project_linf_adaptive(eps + step * scale * np.sign(g), w, rho)
        if k == 1:
            new = z
        else:
            new = project_linf_adaptive(
                eps + MOMENTUM * (z - eps) + (1.0 - MOMENTUM) * (eps - eps_prev), w, rho)
        eps_prev, eps = eps, new
        loss, g = fun(eps, k < steps)
        if loss > best:
            best, best_eps = loss, eps
            since_improve = 0
        else:
            since_improve += 1
        if since_improve >= PATIENCE and k < steps:
            step *= 0.5
            eps_prev = eps = best_eps
            since_improve = 0
            _, g = fun(eps, True)
    return base, best, best_eps


def adaptive_sharpness(model, dataset, cfg):
    """Logit-normalized worst-case adaptive l-inf m-sharpness of ``model``.

    ``dataset`` is ``(X, y)`` from the training split. BatchNorm runs on
    running statistics and no label smoothing is applied. ``model.params``
    is read, never written.
    """
    cfg.validate()
    X, y = dataset
    if cfg.subset_size > len(y):
        raise ValueError(f"subset_size {cfg.subset_size} exceeds dataset of {len(y)}")
    n_batches = cfg.subset_size // cfg.m
    idx = make_rng(cfg.seed, STREAM_SHARPNESS).permutation(len(y))[: n_batches * cfg.m]
    w = model.params.copy()
    per_batch = []
    for b in range(n_batches):
        sel = idx[b * cfg.m:(b + 1) * cfg.m]
        xb, yb = X[sel], y[sel]

        def fun(eps, need_grad, xb=xb, yb=yb):
            if need_grad:
                return model.loss_grad(xb, yb, params=w + eps, logit_normalize=True,
                                       mode="eval", update_stats=False)
            return model.loss(xb, yb, params=w + eps, logit_normalize=True, mode="eval"), None

        if cfg.rho == 0:
            per_batch.append(0.0)
            continue
        base, best, _ = maximize_box(fun, w, cfg.rho, cfg.steps)
        per_batch.append(float(best - base))
    s = float(np.mean(per_batch))
    return SharpnessReport(cfg.rho, cfg.m, cfg.subset_size, cfg.steps, s, per_batch, cfg.seed)
