import math

import numpy as np
import pytest

from samlab.nn import ModelSpec, build_model
from samlab.optim import (AdamWConfig, OptimConfig, Schedule, SGDConfig, StageSwitch,
                          base_step, lr_at, make_optimizer, sam_step, sgd_step, stage_controller)
from samlab.perturb import PerturbSpec, compute_perturbation, scope_mask

from conftest import make_registry


class HalfSquare:
    """``f(w) = 0.5 * ||w||^2``, duck-typed like a Model for ``sam_step``."""

    def __init__(self, w):
        self.params = np.array(w, dtype=float)
        self.registry = make_registry([("w", (self.params.size,), "weight", 0)])

    @property
    def num_params(self):
        return self.params.size

    def trainable_mask(self):
        return np.ones(self.num_params, bool)

    def loss_grad(self, x, y, params=None, smoothing=0.0, update_stats=False, grad_mask=None, **kw):
        w = self.params if params is None else params
        return 0.5 * float(w @ w), w.copy()


def _sgd(lr=0.1, momentum=0.0, wd=0.0):
    return SGDConfig(lr=lr, momentum=momentum, weight_decay=wd)


# --------------------------------------------------------------------------
# base optimizers

def test_sgd_example():
    w = np.array([1.0])
    base_step(w, np.array([1.0]), make_optimizer(_sgd(), 1), 0.1)
    assert w[0] == 0.9


def test_sgd_momentum_and_coupled_decay():
    opt = make_optimizer(_sgd(momentum=0.9, wd=0.1), 1)
    w = np.array([2.0])
    base_step(w, np.array([1.0]), opt, 0.5)  # v = 1 + 0.2
    assert math.isclose(w[0], 2.0 - 0.5 * 1.2)
    base_step(w, np.array([1.0]), opt, 0.5)  # v = 0.9 * 1.2 + 1 + 0.1 * 1.4
    assert math.isclose(w[0], 1.4 - 0.5 * (1.08 + 1 + 0.14))


def test_adamw_first_step():
    opt = make_optimizer(AdamWConfig(lr=1e-3), 1)
    w = np.array([0.0])
    base_step(w, np.array([1.0]), opt, 1e-3)
    assert abs(w[0] + 1e-3) < 1e-10


def test_adamw_decay_is_decoupled():
    opt = make_optimizer(AdamWConfig(weight_decay=0.1), 1)
    w = np.array([2.0])
    base_step(w, np.array([0.0]), opt, 0.5)
    assert w[0] == 2.0 - 0.5 * 0.1 * 2.0


def test_nonpositive_lr_rejected():
    for cfg in (_sgd(), AdamWConfig()):
        with pytest.raises(ValueError):
            base_step(np.ones(1), np.ones(1), make_optimizer(cfg, 1), 0.0)


def test_optimizer_state_roundtrip():
    for cfg in (_sgd(momentum=0.9), AdamWConfig()):
        a = make_optimizer(cfg, 3)
        w = np.ones(3)
        base_step(w, np.array([1.0, -2.0, 0.5]), a, 0.1)
        b = make_optimizer(cfg, 3)
        b.load_state_dict(a.state_dict())
        w1, w2 = w.copy(), w.copy()
        base_step(w1, np.ones(3), a, 0.1)
        base_step(w2, np.ones(3), b, 0.1)
        assert w1.tobytes() == w2.tobytes()


@pytest.mark.parametrize("scope,frozen", [("fix_norm", True), ("only_norm", False)])
def test_trainable_scope_freezes_bits(scope, frozen, toy_batch):
    x, y = toy_batch
    m = build_model(ModelSpec("mlp_bn", dims=[5, 6, 3], trainable_scope=scope), 0)
    before = m.params.copy()
    opt = make_optimizer(_sgd(momentum=0.9, wd=1e-3), m.num_params)
    spec = PerturbSpec("sam", rho=0.1)
    for i in range(5):
        if i % 2:
            sam_step(m, x, y, spec, opt, 0.1)
        else:
            sgd_step(m, x, y, opt, 0.1)
    fixed = m.norm_mask() if frozen else ~m.norm_mask()
    assert m.params[fixed].tobytes() == before[fixed].tobytes()
    assert np.any(m.params[~fixed] != before[~fixed])
    if frozen:
        assert np.all(m.params[m.tag_mask({"norm_weight"})] == 1.0)
        assert np.all(m.params[m.tag_mask({"norm_bias"})] == 0.0)


# --------------------------------------------------------------------------
# SAM step

def test_one_dimensional_sam_example():
    model = HalfSquare([1.0])
    opt = make_optimizer(_sgd(), 1)
    sm = sam_step(model, np.zeros((1, 1)), np.zeros(1), PerturbSpec("sam", rho=0.1), opt, 0.5)
    assert math.isclose(model.params[0], 0.45, rel_tol=1e-15)
    assert math.isclose(sm.eps_scaled_norm, 0.1)
    w = 0.45
    for _ in range(3):
        sam_step(model, np.zeros((1, 1)), np.zeros(1), PerturbSpec("sam", rho=0.1), opt, 0.5)
        w = w * (1 - 0.5 - 0.5 * 0.1 / abs(w))
    assert math.isclose(model.params[0], w, rel_tol=1e-12)


def test_vanishing_rho_is_plain_descent(small_mlp_bn, toy_batch):
    x, y = toy_batch
    a, b = small_mlp_bn.clone(), small_mlp_bn.clone()
    sam_step(a, x, y, PerturbSpec("sam", rho=1e-30), make_optimizer(_sgd(), a.num_params), 0.1)
    sgd_step(b, x, y, make_optimizer(_sgd(), b.num_params), 0.1)
    np.testing.assert_allclose(a.params, b.params, rtol=0, atol=1e-9)


def test_step_descends_from_the_clean_point(small_mlp_bn, toy_batch):
    x, y = toy_batch
    m = small_mlp_bn
    w0 = m.params.copy()
    spec = PerturbSpec("elem_l2", rho=0.2, scope="only_norm")
    probe = m.clone()
    _, g = probe.loss_grad(x, y)
    eps = compute_perturbation(spec, w0, g, m.registry, scope_mask("only_norm", m.registry)).eps
    _, g_adv = probe.loss_grad(x, y, params=w0 + eps, update_stats=True)
    sam_step(m, x, y, spec, make_optimizer(_sgd(), m.num_params), 0.1)
    np.testing.assert_array_equal(m.params, w0 - 0.1 * g_adv)


@pytest.mark.parametrize("variant", ["sam", "elem_l2", "fisher"])
def test_short_circuit_is_bit_equivalent(variant, small_mlp_bn, toy_batch):
    x, y = toy_batch
    spec = PerturbSpec(variant, rho=0.3, scope="only_norm")
    a, b = small_mlp_bn.clone(), small_mlp_bn.clone()
    mask = scope_mask("only_norm", a.registry)
    oa, ob = make_optimizer(_sgd(momentum=0.9), a.num_params), make_optimizer(_sgd(momentum=0.9), b.num_params)
    for _ in range(3):
        sam_step(a, x, y, spec, oa, 0.1, mask=mask, short_circuit=True)
        sam_step(b, x, y, spec, ob, 0.1, mask=mask, short_circuit=False)
    assert a.params.tobytes() == b.params.tobytes()


def test_m_equal_to_batch_is_the_plain_path(small_mlp_bn, toy_batch):
    x, y = toy_batch
    spec = PerturbSpec("elem_l2", rho=0.1)
    a, b = small_mlp_bn.clone(), small_mlp_bn.clone()
    sa = sam_step(a, x, y, spec, make_optimizer(_sgd(), a.num_params), 0.1)
    sb = sam_step(b, x, y, spec, make_optimizer(_sgd(), b.num_params), 0.1, m=len(y))
    assert a.params.tobytes() == b.params.tobytes()
    assert sa == sb


def _brute_force_m_step(model, x, y, spec, m, lr):
    """Perturbed gradients per sub-batch on fresh copies, then their weighted mean."""
    gs, sizes = [], []
    for lo in range(0, len(y), m):
        probe = model.clone()
        xb, yb = x[lo:lo + m], y[lo:lo + m]
        _, g = probe.loss_grad(xb, yb)
        mask = scope_mask(spec.scope, probe.registry, g, probe.num_params)
        eps = compute_perturbation(spec, probe.params, g, probe.registry, mask).eps
        _, g_adv = probe.loss_grad(xb, yb, params=probe.params + eps)
        gs.append(g_adv)
        sizes.append(len(yb))
    avg = sum(s * g for s, g in zip(sizes, gs)) / sum(sizes)
    return model.params - lr * avg, gs


def test_two_sub_batches_average_like_a_brute_force_rerun(small_mlp_bn, toy_batch):
    x, y = toy_batch
    spec = PerturbSpec("sam", rho=0.2, scope="no_norm")
    expected, gs = _brute_force_m_step(small_mlp_bn, x, y, spec, 6, 0.1)
    np.testing.assert_allclose(expected, small_mlp_bn.params - 0.1 * 0.5 * (gs[0] + gs[1]),
                               rtol=0, atol=1e-15)
    sam_step(small_mlp_bn, x, y, spec, make_optimizer(_sgd(), small_mlp_bn.num_params), 0.1, m=6)
    np.testing.assert_allclose(small_mlp_bn.params, expected, rtol=0, atol=1e-12)


def test_partial_last_sub_batch_is_weighted_by_size(small_mlp_bn, toy_batch):
    x, y = toy_batch
    spec = PerturbSpec("fisher", rho=0.05, scope="fisher_topk:0.5")
    expected, _ = _brute_force_m_step(small_mlp_bn, x, y, spec, 5, 0.1)  # sizes 5, 5, 2
    sam_step(small_mlp_bn, x, y, spec, make_optimizer(_sgd(), small_mlp_bn.num_params), 0.1, m=5)
    np.testing.assert_allclose(small_mlp_bn.params, expected, rtol=0, atol=1e-12)


def test_m_validation(small_mlp_bn, toy_batch):
    x, y = toy_batch
    opt = make_optimizer(_sgd(), small_mlp_bn.num_params)
    for m in (0, len(y) + 1):
        with pytest.raises(ValueError):
            sam_step(small_mlp_bn, x, y, PerturbSpec(), opt, 0.1, m=m)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises(small_mlp_bn, toy_batch):
    x, y = toy_batch
    small_mlp_bn.params[:] = 1e200
    with pytest.raises(FloatingPointError):
        sam_step(small_mlp_bn, x, y, PerturbSpec(), make_optimizer(_sgd(), small_mlp_bn.num_params), 0.1)


def test_trajectories_are_deterministic(toy_batch):
    x, y = toy_batch

    def run():
        m = build_model(ModelSpec("mlp_bn", dims=[5, 6, 3]), 11)
        opt = make_optimizer(_sgd(momentum=0.9), m.num_params)
        for _ in range(4):
            sam_step(m, x, y, PerturbSpec("elem_l2_orig", rho=0.5), opt, 0.05, m=4)
        return m.params.tobytes()

    assert run() == run()


# --------------------------------------------------------------------------
# schedules and stages

def test_cosine_schedule():
    s = Schedule("cosine", 0.2, 100)
    assert lr_at(s, 0) == 0.2
    assert lr_at(s, 100) == 0.0 or abs(lr_at(s, 100)) < 1e-17
    assert math.isclose(lr_at(s, 50), 0.1)
    assert lr_at(Schedule("constant", 0.2, 10), 7) == 0.2
    for bad in (-1, 101):
        with pytest.raises(ValueError):
            lr_at(s, bad)


def test_stage_controller():
    spec = PerturbSpec()
    cfg = OptimConfig(_sgd(), perturb=spec, stage_switch=StageSwitch(0, "sgd", "sam"))
    assert {stage_controller(cfg, e) for e in range(10)} == {"sam"}
    cfg = OptimConfig(_sgd(), perturb=spec, stage_switch=StageSwitch(10, "sgd", "sam"))
    assert {stage_controller(cfg, e) for e in range(10)} == {"sgd"}
    cfg = OptimConfig(_sgd(), perturb=spec, stage_switch=StageSwitch(100, "sgd", "sam"))
    kinds = [stage_controller(cfg, e) for e in range(200)]
    assert kinds == ["sgd"] * 100 + ["sam"] * 100
    assert stage_controller(OptimConfig(_sgd()), 3) == "sgd"
    assert stage_controller(OptimConfig(_sgd(), perturb=spec), 3) == "sam"


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(_sgd(lr=0.0)).validate()
    with pytest.raises(ValueError):
        OptimConfig(_sgd(), schedule="step").validate()
    with pytest.raises(ValueError):
        OptimConfig(_sgd(), stage_switch=StageSwitch(3, "sgd", "sam")).validate(10)
    with pytest.raises(ValueError):
        OptimConfig(_sgd(), perturb=PerturbSpec(), stage_switch=StageSwitch(11, "sgd", "sam")).validate(10)
