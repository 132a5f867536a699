"""Numerical check of the SAM-ON convergence bound on analytic test functions.

The parameters are split into a "normalization" block ``N`` and the rest
``A``. Each iteration perturbs only ``w_N`` along the normalized stochastic
gradient of that block, then descends on all coordinates with the gradient
taken at the perturbed point (same sample). The report compares

    lhs = (1/T) sum_t ||grad f(w_t)||^2
    rhs = 2 (f(w_0) - f*) / (h T) + 2 L h M + L^2 rho^2 (1 + L h)

with ``M`` the largest squared stochastic gradient norm seen at the iterates.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .rng import STREAM_NOISE, make_rng

ASCENT_GUARD = 1e-12
FUNCTIONS = ("quadratic", "logistic_toy", "sin_quadratic")


class TestFunction:
    """Finite sum ``f = mean_i f_i`` with a documented smoothness constant ``L``."""

    name = ""
    L = 1.0
    f_star = 0.0
    n_samples = 1

    def value(self, w):
        raise NotImplementedError

    def grad(self, w):
        raise NotImplementedError

    def sample_grad(self, w, i):
        raise NotImplementedError

    def default_w0(self):
        raise NotImplementedError


def _centered_shifts(seed, n, dim, scale):
    a = make_rng(seed, STREAM_NOISE, 1).normal(0.0, scale, size=(n, dim))
    return a - a.mean(axis=0)


class Quadratic(TestFunction):
    """``f(w) = lam/2 ||w||^2`` with per-sample linear shifts that average to zero."""

    name = "quadratic"

    def __init__(self, lam=1.0, dim=2, seed=0, n_samples=8, noise_scale=0.1):
        if lam <= 0:
            raise ValueError(f"lambda must be positive, got {lam}")
        self.lam = lam
        self.dim = dim
        self.L = lam
        self.f_star = 0.0
        self.n_samples = n_samples
        self.shifts = _centered_shifts(seed, n_samples, dim, noise_scale)

    def value(self, w):
        return 0.5 * self.lam * float(w @ w)

    def grad(self, w):
        return self.lam * w

    def sample_grad(self, w, i):
        return self.lam * w + self.shifts[i]

    def default_w0(self):
        w = np.zeros(self.dim)
        w[0] = 1.0
        return w


class SinQuadratic(TestFunction):
    """``f(w) = sum_i sin(w_i) + w_i^2 / 2``; ``f'' = 1 - sin`` lies in [0, 2], so ``L = 2``."""

    name = "sin_quadratic"

    def __init__(self, dim=2, seed=0, n_samples=8, noise_scale=0.1):
        self.dim = dim
        self.L = 2.0
        res = optimize.minimize_scalar(lambda x: np.sin(x) + 0.5 * x * x,
                                       bracket=(-2.0, 0.0), tol=1e-14)
        self.f_star = dim * float(res.fun)
        self.n_samples = n_samples
        self.shifts = _centered_shifts(seed, n_samples, dim, noise_scale)

    def value(self, w):
        return float(np.sum(np.sin(w) + 0.5 * w * w))

    def grad(self, w):
        return np.cos(w) + w

    def sample_grad(self, w, i):
        return np.cos(w) + w + self.shifts[i]

    def default_w0(self):
        return np.ones(self.dim)


class LogisticToy(TestFunction):
    """Mean logistic loss on a seeded, label-noisy problem.

    ``L = 0.25 * sigma_max(X^T X) / n``; ``f*`` comes from BFGS, and the
    data are made non-separable so the minimizer is finite.
    """

    name = "logistic_toy"

    def __init__(self, seed=0, n_samples=32, dim=4):
        rng = make_rng(seed, STREAM_NOISE, 2)
        self.X = rng.normal(size=(n_samples, dim))
        w_true = rng.normal(size=dim)
        y = np.sign(self.X @ w_true + 0.5 * rng.normal(size=n_samples))
        y[y == 0] = 1.0
        flip = rng.permutation(n_samples)[: max(2, n_samples // 5)]
        y[flip] *= -1.0
        self.y = y
        self.dim = dim
        self.n_samples = n_samples
        self.L = 0.25 * float(np.linalg.eigvalsh(self.X.T @ self.X).max()) / n_samples
        res = optimize.minimize(self.value, np.zeros(dim), jac=self.grad, method="BFGS",
                                options={"gtol": 1e-12})
        self.f_star = float(res.fun)

    def value(self, w):
        return float(np.mean(np.logaddexp(0.0, -self.y * (self.X @ w))))

    def grad(self, w):
        s = 0.5 * (1.0 - np.tanh(0.5 * self.y * (self.X @ w)))  # sigmoid(-y x.w)
        return -(s * self.y) @ self.X / self.n_samples

    def sample_grad(self, w, i):
        x, y = self.X[i], self.y[i]
        s = 0.5 * (1.0 - np.tanh(0.5 * y * (x @ w)))
        return -s * y * x

    def default_w0(self):
        return np.full(self.dim, 0.5)


def make_function(name, lam=1.0, seed=0, dim=2):
    if name == "quadratic":
        return Quadratic(lam=lam, dim=dim, seed=seed)
    if name == "sin_quadratic":
        return SinQuadratic(dim=dim, seed=seed)
    if name == "logistic_toy":
        return LogisticToy(seed=seed)
    raise ValueError(f"unknown test function {name!r}")


def parse_coords(text, dim=None):
    """``'0,1'``, ``'0:3'``, ``'all'``, ``'none'`` or ``''`` -> sorted index list."""
    text = str(text).strip().lower()
    if text in ("", "none", "empty"):
        return []
    if text == "all":
        if dim is None:
            raise ValueError("'all' needs the problem dimension")
        return list(range(dim))
    out = set()
    for part in text.split(","):
        part = part.strip()
        if ":" in part:
            lo, hi = part.split(":")
            out.update(range(int(lo), int(hi)))
        elif part:
            out.add(int(part))
    return sorted(out)


@dataclass
class ConvergenceConfig:
    test_fn: str = "quadratic"
    h: float = 0.5
    rho: float = 0.1
    T: int = 10
    noise: int | None = None  # per-sample noise seed; None means exact gradients
    norm_coords: list | str = "all"
    lam: float = 1.0
    dim: int = 2
    fn_seed: int = 0
    w0: list | None = None


@dataclass
class BoundReport:
    lhs: float
    rhs: float
    M_empirical: float
    ratio: float
    L: float
    h: float
    rho: float
    T: int
    f_w0: float
    f_star: float
    ascent_fired: int
    ascent_skipped: int
    max_ascent_norm_error: float
    grad_sq_norms: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def run_convergence_check(cfg, fn=None, trace=None):
    """Run the SAM-ON iteration and evaluate both sides of the bound.

    ``trace``, if a list, receives ``(w_t, w_half)`` pairs.
    """
    fn = fn or make_function(cfg.test_fn, lam=cfg.lam, seed=cfg.fn_seed, dim=cfg.dim)
    if cfg.T < 1:
        raise ValueError(f"T must be >= 1, got {cfg.T}")
    if not cfg.h > 0 or cfg.h > (1.0 / fn.L) * (1.0 + 1e-12):
        raise ValueError(f"step size h={cfg.h} violates 0 < h <= 1/L = {1.0 / fn.L}")
    w = np.array(cfg.w0 if cfg.w0 is not None else fn.default_w0(), dtype=np.float64)
    coords = cfg.norm_coords
    if isinstance(coords, str):
        coords = parse_coords(coords, w.size)
    block = np.zeros(w.size, dtype=bool)
    block[list(coords)] = True
    rng = make_rng(cfg.noise, STREAM_NOISE) if cfg.noise is not None else None

    f0 = fn.value(w)
    sq, M = [], 0.0
    fired = skipped = 0
    norm_err = 0.0
    for _ in range(cfg.T):
        true_g = fn.grad(w)
        sq.append(float(true_g @ true_g))
        i = int(rng.integers(fn.n_samples)) if rng is not None else None
        g = fn.sample_grad(w, i) if i is not None else true_g
        M = max(M, float(g @ g))
        w_half = w.copy()
        if block.any():
            gN = g[block]
            nrm = np.linalg.norm(gN)
            if nrm >= ASCENT_GUARD:
                w_half[block] = w[block] + cfg.rho * gN / nrm
                fired += 1
                norm_err = max(norm_err, abs(np.linalg.norm(w_half[block] - w[block]) - cfg.rho))
            else:
                skipped += 1
        if trace is not None:
            trace.append((w.copy(), w_half.copy()))
        g_half = fn.sample_grad(w_half, i) if i is not None else fn.grad(w_half)
        w = w - cfg.h * g_half

    L, h, T = fn.L, cfg.h, cfg.T
    lhs = float(np.mean(sq))
    rhs = 2.0 * (f0 - fn.f_star) / (h * T) + 2.0 * L * h * M + L * L * cfg.rho ** 2 * (1.0 + L * h)
    return BoundReport(lhs, rhs, M, lhs / rhs, L, h, cfg.rho, T, f0, fn.f_star,
                       fired, skipped, norm_err, sq)
