"""Base optimizers, the SAM ascent/descent step, schedules and stage switching."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .perturb import PerturbSpec, compute_perturbation, scope_mask


@dataclass
class SGDConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    kind: str = "sgd"


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    kind: str = "adamw"


@dataclass
class Schedule:
    kind: str = "cosine"  # cosine | constant
    base_lr: float = 0.1
    total_steps: int = 1


@dataclass
class StageSwitch:
    epoch: int
    from_kind: str
    to_kind: str


@dataclass
class OptimConfig:
    base: SGDConfig | AdamWConfig
    schedule: str = "cosine"
    perturb: PerturbSpec | None = None
    m: int | None = None
    stage_switch: StageSwitch | None = None

    def validate(self, epochs=None):
        if not self.base.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.base.lr}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.m is not None and self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        sw = self.stage_switch
        if sw is not None:
            for k in (sw.from_kind, sw.to_kind):
                if k not in ("sgd", "sam"):
                    raise ValueError(f"stage kind must be 'sgd' or 'sam', got {k!r}")
            if epochs is not None and not 0 <= sw.epoch <= epochs:
                raise ValueError(f"stage switch epoch {sw.epoch} outside run of {epochs} epochs")
            if "sam" in (sw.from_kind, sw.to_kind) and self.perturb is None:
                raise ValueError("stage switch to/from sam needs a perturb spec")
        return self


@dataclass
class StepMetrics:
    loss_clean: float
    loss_perturbed: float
    eps_scaled_norm: float
    degenerate_events: int
    active_params: int


# --------------------------------------------------------------------------
# base optimizers

class SGD:
    """Heavy-ball SGD with L2 folded into the momentum buffer.

    ``v <- mu * v + g + wd * w``;  ``w <- w - lr * v``.
    """

    kind = "sgd"

    def __init__(self, cfg, n):
        self.cfg = cfg
        self.velocity = np.zeros(n)

    def step(self, params, grads, lr, trainable=None):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        c = self.cfg
        d = grads + c.weight_decay * params if c.weight_decay else grads
        v = c.momentum * self.velocity + d
        if trainable is None:
            self.velocity = v
            params -= lr * v
        else:
            self.velocity[trainable] = v[trainable]
            params[trainable] -= lr * v[trainable]

    def state_dict(self):
        return {"kind": "sgd", "velocity": self.velocity.tolist()}

    def load_state_dict(self, d):
        self.velocity = np.asarray(d["velocity"], dtype=np.float64)


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    kind = "adamw"

    def __init__(self, cfg, n):
        self.cfg = cfg
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grads, lr, trainable=None):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        c = self.cfg
        self.t += 1
        m = c.beta1 * self.m + (1 - c.beta1) * grads
        v = c.beta2 * self.v + (1 - c.beta2) * grads * grads
        mhat = m / (1 - c.beta1 ** self.t)
        vhat = v / (1 - c.beta2 ** self.t)
        upd = mhat / (np.sqrt(vhat) + c.eps) + c.weight_decay * params
        if trainable is None:
            self.m, self.v = m, v
            params -= lr * upd
        else:
            self.m[trainable] = m[trainable]
            self.v[trainable] = v[trainable]
            params[trainable] -= lr * upd[trainable]

    def state_dict(self):
        return {"kind": "adamw", "m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}

    def load_state_dict(self, d):
        self.m = np.asarray(d["m"], dtype=np.float64)
        self.v = np.asarray(d["v"], dtype=np.float64)
        self.t = int(d["t"])


def make_optimizer(base, n):
    if base.kind == "sgd":
        return SGD(base, n)
    if base.kind == "adamw":
        return AdamW(base, n)
    raise ValueError(f"unknown optimizer {base.kind!r}")


def base_step(params, grads, optimizer, lr, trainable=None):
    """Apply one descent step in place; frozen coordinates keep their bits."""
    optimizer.step(params, grads, lr, trainable)
    return params


# --------------------------------------------------------------------------
# steps

def _check_finite(value, where):
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} during {where}")
    return value


def sgd_step(model, x, y, optimizer, lr, smoothing=0.0):
    trainable = model.trainable_mask()
    loss, g = model.loss_grad(x, y, smoothing=smoothing, update_stats=True, grad_mask=trainable)
    _check_finite(loss, "descent pass")
    base_step(model.params, g, optimizer, lr, trainable)
    return StepMetrics(loss, float("nan"), float("nan"), 0, 0)


def _ascent_descent(model, x, y, spec, mask, smoothing, short_circuit, trainable):
    """Perturbed gradient for one (sub-)batch; ``model.params`` is never modified."""
    needs_full = spec.scope.kind == "fisher_topk" and mask is None
    grad_mask = None if (needs_full or not short_circuit) else mask
    loss0, g = model.loss_grad(x, y, smoothing=smoothing, update_stats=False, grad_mask=grad_mask)
    _check_finite(loss0, "ascent pass")
    if mask is None:
        mask = scope_mask(spec.scope, model.registry, g, model.num_params)
    pert = compute_perturbation(spec, model.params, g, model.registry, mask)
    loss1, g_adv = model.loss_grad(x, y, params=model.params + pert.eps, smoothing=smoothing,
                                   update_stats=True, grad_mask=trainable)
    _check_finite(loss1, "perturbed pass")
    return loss0, loss1, g_adv, pert


def sam_step(model, x, y, spec, optimizer, lr, m=None, mask=None, smoothing=0.0,
             short_circuit=True):
    """One SAM update: ascend to ``w + eps``, take the gradient there, descend from ``w``.

    With ``m`` the batch is split in order into ``ceil(|B| / m)`` sub-batches,
    each gets its own ``eps``, and the perturbed gradients are averaged with
    weights ``n_j / |B|``. ``mask`` is the scope mask; when ``None`` it is
    derived from ``spec.scope`` (for ``fisher_topk`` from the clean gradient
    of the current sub-batch).
    """
    spec = spec if isinstance(spec, PerturbSpec) else PerturbSpec(**spec)
    n = len(y)
    if n == 0:
        raise ValueError("empty batch")
    if m is not None and not 1 <= m <= n:
        raise ValueError(f"m={m} must lie in [1, {n}]")
    trainable = model.trainable_mask()
    bounds = [(0, n)] if m is None else [(s, min(s + m, n)) for s in range(0, n, m)]
    acc = np.zeros(model.num_params)
    loss0 = loss1 = norm = 0.0
    degenerate = active = 0
    for lo, hi in bounds:
        w = (hi - lo) / n
        l0, l1, g_adv, pert = _ascent_descent(model, x[lo:hi], y[lo:hi], spec, mask, smoothing,
                                              short_circuit, trainable)
        acc += w * g_adv
        loss0 += w * l0
        loss1 += w * l1
        norm += w * pert.scaled_norm
        degenerate += int(pert.degenerate)
        active = max(active, pert.active_count)
    base_step(model.params, acc, optimizer, lr, trainable)
    return StepMetrics(loss0, loss1, norm, degenerate, active)


# --------------------------------------------------------------------------
# schedules and stages

def lr_at(schedule, step):
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == "constant":
        return schedule.base_lr
    if schedule.kind == "cosine":
        return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / schedule.total_steps))
    raise ValueError(f"unknown schedule {schedule.kind!r}")


def stage_controller(config, epoch):
    """``'sgd'`` or ``'sam'`` for ``epoch``; the switch epoch already uses ``to``."""
    sw = config.stage_switch
    if sw is None:
        return "sam" if config.perturb is not None else "sgd"
    return sw.from_kind if epoch < sw.epoch else sw.to_kind
