"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line, printed in the terminal summary (and
directly when this file is run as a script).
"""

import contextlib
import copy
import csv
import itertools
import math
import statistics
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, make_registry
from samlab.convergence import ConvergenceConfig, make_function, run_convergence_check
from samlab.harness import checkpoint_load, load_dataset, parse_config, train
from samlab.nn import ModelSpec, build_model, norm_fraction
from samlab.optim import SGDConfig, make_optimizer, sam_step
from samlab.perturb import (VARIANTS, PerturbSpec, compute_perturbation, normalization_operator,
                            scope_mask)
from samlab.sharpness import SharpnessConfig, adaptive_sharpness
from samlab.tensor import OP_KINDS, grad_check
from test_nn import ARCH_SPECS, _fd_model_error
from test_optim import _brute_force_m_step
from test_perturb import test_operator_values_on_fixture as _table_values
from test_tensor import _cases

pytestmark = pytest.mark.acceptance


@contextlib.contextmanager
def criterion(number, title, budget_s):
    t0 = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - t0
        assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - t0
        line = f"[FAIL] {number:2d}. {title} ({elapsed:.1f}s): {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        raise
    line = f"[PASS] {number:2d}. {title} ({elapsed:.1f}s)"
    ACCEPTANCE_LINES[number] = line
    print(line)


def _last_row(run_dir):
    with open(f"{run_dir}/metrics.csv", newline="") as fh:
        return list(csv.DictReader(fh))[-1]


# --------------------------------------------------------------------------

def test_01_gradient_correctness():
    with criterion(1, "gradient correctness, every op and model, seeds 0-4", 30):
        worst = 0.0
        for seed in range(5):
            for kind in OP_KINDS:
                for point, fn in _cases(kind, seed):
                    worst = max(worst, grad_check(fn, point).max_rel_error)
            for spec in ARCH_SPECS:
                model = build_model(spec, seed)
                rng = np.random.default_rng(seed)
                model.params += 0.1 * rng.normal(size=model.num_params)
                x = rng.normal(size=(6, int(np.prod(spec.input_shape or [spec.dims[0]]))))
                y = rng.integers(0, 3, size=6)
                worst = max(worst, _fd_model_error(model, x, y, logit_normalize=bool(seed % 2)))
        assert worst < 1e-5, f"max relative error {worst:.2e}"


def test_02_perturbation_norm_identity():
    with criterion(2, "norm identity, 6 variants x 5 scopes x 20 instances", 5):
        model = build_model(ModelSpec("mlp_bn", dims=[4, 5, 3]), seed=0)
        reg, n = model.registry, model.num_params
        worst = 0.0
        for variant, seed in itertools.product(VARIANTS, range(20)):
            rng = np.random.default_rng(seed)
            w, g = rng.normal(size=n), rng.normal(size=n)
            rho = float(rng.uniform(0.01, 2.0))
            for scope in ("all", "only_norm", "no_norm", f"random:0.5:{seed}", "fisher_topk:0.5"):
                spec = PerturbSpec(variant, rho=rho, scope=scope)
                mask = scope_mask(spec.scope, reg, g, n)
                eps = compute_perturbation(spec, w, g, reg, mask).eps
                t = np.where(mask, normalization_operator(variant, w, g, spec.eta, reg).t_diag, 0.0)
                assert np.all(eps[~mask] == 0.0)
                z = eps[t > 0] / t[t > 0]
                norm = np.max(np.abs(z)) if spec.p == math.inf else np.sqrt(z @ z)
                worst = max(worst, abs(norm - rho))
        assert worst <= 1e-9, f"max deviation {worst:.2e}"


def test_03_operator_table_conformance():
    with criterion(3, "operator table values on a 10-parameter fixture", 1):
        _table_values(make_registry([
            ("0.linear.weight", (2, 2), "weight", 0),
            ("0.linear.bias", (2,), "bias", 1),
            ("1.bn.gamma", (2,), "norm_weight", 2),
            ("1.bn.beta", (2,), "norm_bias", 3),
        ]))


def test_04_mask_algebra():
    with criterion(4, "mask algebra and norm fraction", 1):
        m = build_model(ModelSpec("mlp_bn", dims=[784, 256, 128, 10]), seed=0)
        reg, n = m.registry, m.num_params
        only, no = scope_mask("only_norm", reg), scope_mask("no_norm", reg)
        assert np.array_equal(only | no, scope_mask("all", reg))
        for s in (0.1, 0.5, 0.9, 0.9995):
            assert int(scope_mask(f"random:{s}:3", reg).sum()) == math.floor((1 - s) * n + 0.5)
        g = np.random.default_rng(0).normal(size=n)
        assert np.array_equal(scope_mask("fisher_topk:0", reg, g), scope_mask("all", reg))
        assert norm_fraction(reg) == 768 / 235_914 and int(only.sum()) == 768


def test_05_m_sharpness():
    with criterion(5, "m-sharpness degeneration and sub-batch averaging", 10):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(16, 5)), rng.integers(0, 3, size=16)
        model = build_model(ModelSpec("mlp_bn", dims=[5, 8, 3]), 0)
        for spec in (PerturbSpec("sam", 0.1), PerturbSpec("elem_l2", 0.3, scope="only_norm")):
            a, b = model.clone(), model.clone()
            sam_step(a, x, y, spec, make_optimizer(SGDConfig(), a.num_params), 0.1)
            sam_step(b, x, y, spec, make_optimizer(SGDConfig(), b.num_params), 0.1, m=16)
            assert a.params.tobytes() == b.params.tobytes()
            expected, _ = _brute_force_m_step(model, x, y, spec, 8, 0.1)
            c = model.clone()
            sam_step(c, x, y, spec, make_optimizer(SGDConfig(momentum=0.0), c.num_params), 0.1, m=8)
            err = float(np.max(np.abs(c.params - expected)))
            assert err <= 1e-12, f"averaging mismatch {err:.2e}"


def test_06_convergence_bound():
    with criterion(6, "convergence bound on the full grid plus the quadratic example", 10):
        rep = run_convergence_check(ConvergenceConfig("quadratic", h=0.5, rho=0.1, T=10))
        assert abs(rep.lhs - 0.124) <= 1e-3 and abs(rep.rhs - 1.215) <= 1e-12 and rep.M_empirical == 1
        runs, worst = 0, 0.0
        for name in ("quadratic", "sin_quadratic", "logistic_toy"):
            fn = make_function(name, dim=4 if name == "logistic_toy" else 2)
            dim = fn.default_w0().size
            for frac, rho, seed in itertools.product((0.1, 0.5, 1.0), (0.01, 0.1, 0.5), range(5)):
                for coords, T in (("0", 100), ("all", 20)):
                    cfg = ConvergenceConfig(name, h=frac / fn.L, rho=rho, T=T, noise=seed,
                                            norm_coords=coords, dim=dim)
                    worst = max(worst, run_convergence_check(cfg, fn=fn).ratio)
                    runs += 1
        assert runs >= 45 and worst <= 1.0, f"max ratio {worst:.3f} over {runs} runs"


def test_07_sharpness_evaluator(tmp_path):
    with criterion(7, "sharpness evaluator oracles", 60):
        cfg = {
            "model": {"architecture": "mlp_bn", "dims": [6, 16, 3]},
            "optim": {"base": {"kind": "sgd", "lr": 0.05, "momentum": 0.9}},
            "data": {"kind": "blobs", "classes": 3, "dim": 6, "n": 400, "noise": 1.5, "seed": 1},
            "epochs": 4, "batch_size": 32, "seed": 0,
        }
        train(parse_config(cfg), out_dir=str(tmp_path))
        model = checkpoint_load(str(tmp_path / "checkpoint.json")).model
        tr, _ = load_dataset(cfg["data"])
        data = (tr.X, tr.y)
        before = model.params.copy()
        assert adaptive_sharpness(model, data, SharpnessConfig(0.0, 32, 128)).s_w_m == 0.0
        prev = -1.0
        for rho in (0.001, 0.003, 0.005):
            many = adaptive_sharpness(model, data, SharpnessConfig(rho, 32, 128, 20))
            one = adaptive_sharpness(model, data, SharpnessConfig(rho, 32, 128, 1))
            assert all(a >= b for a, b in zip(many.per_batch, one.per_batch))
            assert prev <= many.s_w_m + 1e-9
            prev = many.s_w_m
        assert model.params.tobytes() == before.tobytes()

        corners = np.array(list(itertools.product([-1.0, 1.0], repeat=12)))
        for seed, rho in itertools.product(range(3), (0.01, 0.1, 0.3)):
            tiny = build_model(ModelSpec("mlp_bn", dims=[3, 3]), seed)
            rng = np.random.default_rng(seed)
            tiny.params += 0.3 * rng.normal(size=12)
            x, y = rng.normal(size=(8, 3)), rng.integers(0, 3, size=8)
            w = tiny.params.copy()
            rep = adaptive_sharpness(tiny, (x, y), SharpnessConfig(rho, 8, 8, 20))
            best = tiny.loss(x, y, logit_normalize=True) + rep.s_w_m
            brute = max(tiny.loss(x, y, w + rho * np.abs(w) * s, logit_normalize=True) for s in corners)
            assert abs(best - brute) <= 0.01 * brute, (seed, rho, best, brute)
            assert tiny.params.tobytes() == w.tobytes()


DIRECTIONAL_BASE = {
    "model": {"architecture": "mlp_bn", "dims": [20, 64, 64, 4]},
    "optim": {"base": {"kind": "sgd", "lr": 0.05, "momentum": 0.9, "weight_decay": 0.0005},
              "schedule": "cosine"},
    "data": {"kind": "blobs", "classes": 4, "dim": 20, "n": 2000, "noise": 3.0, "seed": 0},
    "epochs": 50, "batch_size": 64, "seed": 0, "label_smoothing": 0.1,
}
RHO_GRID = {"all": (0.05, 0.1, 0.25), "only_norm": (0.1, 0.5, 1.0)}


@pytest.mark.slow
def test_08_directional_replication(tmp_path):
    with criterion(8, "directional toy replication (seed 0, pinned protocol)", 600):
        def run(name, perturb):
            cfg = copy.deepcopy(DIRECTIONAL_BASE)
            cfg["optim"]["perturb"] = perturb
            out = tmp_path / name
            train(parse_config(cfg), out_dir=str(out))
            return float(_last_row(out)["test_acc"]), out

        sgd_acc, _ = run("sgd", None)
        assert 0.85 <= sgd_acc <= 0.95, f"SGD test acc {sgd_acc} outside the 85-95% band"
        best = {}
        for scope, grid in RHO_GRID.items():
            results = [run(f"{scope}_{r}", {"variant": "sam", "rho": r, "scope": scope}) for r in grid]
            best[scope] = max(results, key=lambda r: r[0])  # first maximum on ties
        acc_all, acc_on = best["all"][0], best["only_norm"][0]
        assert max(acc_all, acc_on) >= sgd_acc, (sgd_acc, acc_all, acc_on)
        assert acc_all >= sgd_acc, f"SAM-all {acc_all} < SGD {sgd_acc}"
        assert acc_on >= acc_all - 0.005, f"SAM-ON {acc_on} < SAM-all {acc_all} - 0.5pt"

        tr, _ = load_dataset(DIRECTIONAL_BASE["data"])
        sharp = {}
        for scope, (_, out) in best.items():
            model = checkpoint_load(str(out / "checkpoint.json")).model
            sharp[scope] = adaptive_sharpness(model, (tr.X, tr.y),
                                              SharpnessConfig(0.003, 128, 1024, 20, 0)).s_w_m
        assert sharp["only_norm"] > sharp["all"], sharp


def test_09_determinism_and_resume(tmp_path):
    with criterion(9, "byte-identical reruns and split-run resume", 120):
        cfg = parse_config({
            "model": {"architecture": "mlp_bn", "dims": [8, 16, 3]},
            "optim": {"base": {"kind": "sgd", "lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4},
                      "perturb": {"variant": "elem_l2", "rho": 0.5, "scope": "only_norm"}, "m": 16},
            "data": {"kind": "blobs", "classes": 3, "dim": 8, "n": 600, "noise": 2.0, "seed": 4},
            "epochs": 6, "batch_size": 32, "seed": 3,
        })
        for d in ("a", "b"):
            train(cfg, out_dir=str(tmp_path / d))
        train(cfg, out_dir=str(tmp_path / "s"), until_epoch=3)
        train(cfg, out_dir=str(tmp_path / "s"), resume_from=str(tmp_path / "s" / "checkpoint.json"))
        for name in ("metrics.csv", "checkpoint.json"):
            a = (tmp_path / "a" / name).read_bytes()
            assert a == (tmp_path / "b" / name).read_bytes(), f"rerun differs in {name}"
            assert a == (tmp_path / "s" / name).read_bytes(), f"resume differs in {name}"


RUNTIME_BASE = {
    "model": {"architecture": "mini_conv_bn", "channels": [8, 16], "input_shape": [1, 8, 8],
              "num_classes": 4},
    "optim": {"base": {"kind": "sgd", "lr": 0.05, "momentum": 0.9, "weight_decay": 0.0005}},
    "data": {"kind": "blobs", "classes": 4, "dim": 64, "n": 1280, "noise": 3.0, "seed": 0},
    "epochs": 5, "batch_size": 64, "seed": 0, "short_circuit": True,
}


@pytest.mark.slow
def test_10_runtime_ordering(tmp_path):
    with criterion(10, "per-epoch wall time SGD < SAM-ON < SAM-all (5-epoch medians)", 300):
        medians = {}
        for name, perturb in (("sgd", None),
                              ("sam_on", {"variant": "sam", "rho": 0.5, "scope": "only_norm"}),
                              ("sam_all", {"variant": "sam", "rho": 0.1, "scope": "all"})):
            cfg = copy.deepcopy(RUNTIME_BASE)
            cfg["optim"]["perturb"] = perturb
            train(parse_config(cfg), out_dir=str(tmp_path / name))
            with open(tmp_path / name / "timing.csv", newline="") as fh:
                medians[name] = statistics.median(float(r["wall_ms"]) for r in csv.DictReader(fh))
        assert medians["sgd"] < medians["sam_on"] < medians["sam_all"], medians


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s"]))
