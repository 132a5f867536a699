"""Diagonal normalization operators, scope masks and the ascent perturbation.

Every SAM variant is a choice of diagonal operator ``T`` plus a norm order:

    p = 2:   eps = rho * T^2 g / ||T g||_2
    p = inf: eps = rho * T * sign(g)

A scope mask zeroes ``T`` outside the chosen coordinates, so the scaled
magnitude ``||T^+ eps||_p`` over the remaining support is still ``rho``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import NORM_TAGS, TAGS
from .rng import STREAM_MASK, make_rng

VARIANTS = ("sam", "elem_l2", "elem_l2_orig", "elem_linf", "layer_l2", "fisher")
DEFAULT_ETA = {"elem_l2_orig": 0.01, "fisher": 1.0}
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class Scope:
    kind: str  # all | only_norm | no_norm | random | fisher_topk
    sparsity: float = 0.0
    seed: int = 0

    @classmethod
    def parse(cls, text):
        """Parse ``all``, ``only_norm``, ``no_norm``, ``random:<s>:<seed>`` or ``fisher_topk:<s>``."""
        if isinstance(text, Scope):
            return text
        parts = str(text).split(":")
        kind = parts[0]
        if kind in ("all", "only_norm", "no_norm") and len(parts) == 1:
            return cls(kind)
        try:
            if kind == "random" and len(parts) == 3:
                return cls(kind, float(parts[1]), int(parts[2])).validate()
            if kind == "fisher_topk" and len(parts) == 2:
                return cls(kind, float(parts[1])).validate()
        except ValueError as exc:
            raise ValueError(f"bad scope {text!r}: {exc}") from None
        raise ValueError(f"bad scope {text!r}")

    def validate(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError(f"sparsity must lie in [0, 1], got {self.sparsity}")
        return self

    def __str__(self):
        if self.kind == "random":
            return f"random:{self.sparsity!r}:{self.seed}"
        if self.kind == "fisher_topk":
            return f"fisher_topk:{self.sparsity!r}"
        return self.kind


@dataclass(frozen=True)
class PerturbSpec:
    variant: str = "sam"
    rho: float = 0.05
    eta: float | None = None
    scope: Scope | str = "all"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.eta is None:
            object.__setattr__(self, "eta", DEFAULT_ETA.get(self.variant, 0.0))
        if self.eta < 0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        object.__setattr__(self, "scope", Scope.parse(self.scope))

    @property
    def p(self):
        return math.inf if self.variant == "elem_linf" else 2

    def to_dict(self):
        return {"variant": self.variant, "rho": self.rho, "eta": self.eta, "scope": str(self.scope)}


@dataclass
class MaskedOperator:
    t_diag: np.ndarray
    active_count: int

    @classmethod
    def from_diag(cls, t):
        return cls(t, int(np.count_nonzero(t > 0)))

    def masked(self, mask):
        t = np.where(mask, self.t_diag, 0.0)
        return MaskedOperator.from_diag(t)


@dataclass
class Perturbation:
    eps: np.ndarray
    scaled_norm: float
    degenerate: bool
    active_count: int


def normalization_operator(variant, params, grads, eta, registry):
    """Diagonal ``T`` for ``variant`` before any scope mask is applied."""
    params = np.asarray(params, dtype=np.float64)
    if variant == "sam":
        t = np.ones_like(params)
    elif variant in ("elem_l2", "elem_linf"):
        t = np.abs(params)
    elif variant == "elem_l2_orig":
        t = np.empty_like(params)
        for v in registry:
            sl = slice(v.offset, v.stop)
            if v.tag in ("weight", "norm_weight"):
                t[sl] = np.abs(params[sl]) + eta
            else:
                t[sl] = 1.0 + eta
    elif variant == "layer_l2":
        t = np.empty_like(params)
        for v in registry:
            sl = slice(v.offset, v.stop)
            t[sl] = np.linalg.norm(params[sl])
    elif variant == "fisher":
        g = np.asarray(grads, dtype=np.float64)
        t = 1.0 / np.sqrt(1.0 + eta * g * g)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return MaskedOperator.from_diag(t)


def _count(fraction, total):
    # round half up, so the count never depends on banker's rounding
    return int(math.floor(fraction * total + 0.5))


def scope_mask(scope, registry, grads=None, total_params=None, seed=None):
    """Boolean mask of coordinates the ascent step may move.

    ``seed`` overrides the seed embedded in a ``random`` scope.
    """
    scope = Scope.parse(scope)
    if total_params is None:
        total_params = sum(v.length for v in registry)
    norm = np.zeros(total_params, dtype=bool)
    for v in registry:
        if v.tag in NORM_TAGS:
            norm[v.offset:v.stop] = True
    if scope.kind == "all":
        return np.ones(total_params, dtype=bool)
    if scope.kind == "only_norm":
        return norm
    if scope.kind == "no_norm":
        return ~norm
    k = _count(1.0 - scope.sparsity, total_params)
    mask = np.zeros(total_params, dtype=bool)
    if scope.kind == "random":
        rng = make_rng(scope.seed if seed is None else seed, STREAM_MASK)
        mask[rng.permutation(total_params)[:k]] = True
        return mask
    if scope.kind == "fisher_topk":
        if grads is None:
            raise ValueError("fisher_topk scope needs gradients")
        g2 = np.asarray(grads, dtype=np.float64) ** 2
        # stable sort on -g^2 keeps the lower flat index first among ties
        order = np.argsort(-g2, kind="stable")
        mask[order[:k]] = True
        return mask
    raise ValueError(f"unknown scope {scope.kind!r}")


def scaled_norm(eps, t_diag, p):
    """``||T^+ eps||_p`` restricted to the support of ``t_diag``."""
    support = t_diag > 0
    if not support.any():
        return 0.0
    z = eps[support] / t_diag[support]
    if p == math.inf:
        return float(np.max(np.abs(z)))
    return float(np.linalg.norm(z))


def perturbation(operator, mask, grads, rho, p):
    """Ascent step ``eps`` for ``operator`` restricted to ``mask``."""
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    op = operator.masked(mask) if mask is not None else operator
    t = op.t_diag
    g = np.asarray(grads, dtype=np.float64)
    if p == math.inf:
        eps = rho * t * np.sign(g)
        degenerate = not np.any(eps != 0)
        if degenerate:
            eps = np.zeros_like(g)
    elif p == 2:
        tg = t * g
        denom = np.linalg.norm(tg)
        degenerate = denom < DEGENERATE_NORM
        eps = np.zeros_like(g) if degenerate else rho * (t * t * g) / denom
    else:
        raise ValueError(f"p must be 2 or inf, got {p}")
    norm = 0.0 if degenerate else scaled_norm(eps, t, p)
    return Perturbation(eps, norm, bool(degenerate), op.active_count)


def compute_perturbation(spec, params, grads, registry, mask):
    """Operator, mask composition and eps for one ascent step of ``spec``."""
    op = normalization_operator(spec.variant, params, grads, spec.eta, registry)
    return perturbation(op, mask, grads, spec.rho, spec.p)


def sparsity_report(mask, registry):
    """Fraction of coordinates *not* perturbed, plus active counts per tag."""
    mask = np.asarray(mask, dtype=bool)
    total = int(mask.size)
    per_tag = {tag: 0 for tag in TAGS}
    totals = {tag: 0 for tag in TAGS}
    for v in registry:
        per_tag[v.tag] += int(mask[v.offset:v.stop].sum())
        totals[v.tag] += v.length
    active = int(mask.sum())
    return {
        "sparsity": 1.0 - active / total if total else 0.0,
        "active": active,
        "total": total,
        "active_by_tag": per_tag,
        "total_by_tag": totals,
    }
