import numpy as np
import pytest

from samlab.nn import ModelSpec, ParamView, build_model

# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def make_registry(layout):
    """Registry from ``[(param_id, shape, tag, group), ...]`` laid out contiguously."""
    views, off = [], 0
    for i, (pid, shape, tag, group) in enumerate(layout):
        n = int(np.prod(shape))
        views.append(ParamView(pid, off, n, tuple(shape), tag, i, group))
        off += n
    return views


@pytest.fixture
def ten_param_registry():
    # 4 weights, 2 biases, 2 norm weights, 2 norm biases
    return make_registry([
        ("0.linear.weight", (2, 2), "weight", 0),
        ("0.linear.bias", (2,), "bias", 1),
        ("1.bn.gamma", (2,), "norm_weight", 2),
        ("1.bn.beta", (2,), "norm_bias", 3),
    ])


@pytest.fixture
def small_mlp_bn():
    return build_model(ModelSpec("mlp_bn", dims=[5, 6, 4, 3]), seed=0)


@pytest.fixture
def toy_batch():
    rng = np.random.default_rng(0)
    return rng.normal(size=(12, 5)), rng.integers(0, 3, size=12)
