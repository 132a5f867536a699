import os
import subprocess
import sys

import numpy as np
import pytest

from samlab import _accel

needs_numba = pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba backend not active")


def _direct_conv(x, w):
    # naive loop oracle: stride 1, zero padding 1
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, :, i:i + 3, j:j + 3]
            out[:, :, i, j] = np.einsum("ncab,ocab->no", patch, w)
    return out


@pytest.mark.parametrize("seed", range(3))
def test_numpy_conv_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(_accel.conv3x3_forward_np(x, w), _direct_conv(x, w), atol=1e-12)


def test_conv_backward_is_the_adjoint():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(5, 3, 3, 3))
    dy = rng.normal(size=(2, 5, 4, 4))
    lhs = np.sum(_accel.conv3x3_forward_np(x, w) * dy)
    assert np.isclose(lhs, np.sum(x * _accel.conv3x3_backward_input_np(dy, w)), atol=1e-10)
    assert np.isclose(lhs, np.sum(w * _accel.conv3x3_backward_weight_np(dy, x)), atol=1e-10)


def test_pool_picks_first_maximum_on_ties():
    x = np.zeros((1, 1, 2, 2))
    out, idx = _accel.maxpool2x2_forward_np(x)
    assert idx[0, 0, 0, 0] == 0 and out[0, 0, 0, 0] == 0.0
    dx = _accel.maxpool2x2_backward_np(np.ones((1, 1, 1, 1)), idx, x.shape)
    np.testing.assert_array_equal(dx[0, 0], [[1.0, 0.0], [0.0, 0.0]])


@needs_numba
@pytest.mark.parametrize("seed", range(3))
def test_numba_and_numpy_kernels_agree(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(3, 2, 6, 4)), rng.normal(size=(5, 2, 3, 3))
    dy = rng.normal(size=(3, 5, 6, 4))
    np.testing.assert_allclose(_accel._conv3x3_forward_nb(x, w),
                               _accel.conv3x3_forward_np(x, w), atol=1e-12)
    np.testing.assert_allclose(_accel._conv3x3_backward_input_nb(dy, w),
                               _accel.conv3x3_backward_input_np(dy, w), atol=1e-12)
    np.testing.assert_allclose(_accel._conv3x3_backward_weight_nb(dy, x),
                               _accel.conv3x3_backward_weight_np(dy, x), atol=1e-12)
    xi = rng.integers(0, 3, size=(2, 3, 4, 6)).astype(np.float64)  # plenty of ties
    out_nb, idx_nb = _accel._maxpool2x2_forward_nb(xi)
    out_np, idx_np = _accel.maxpool2x2_forward_np(xi)
    np.testing.assert_array_equal(out_nb, out_np)
    np.testing.assert_array_equal(idx_nb, idx_np)
    g = rng.normal(size=out_np.shape)
    np.testing.assert_array_equal(_accel.maxpool2x2_backward(g, idx_nb, xi.shape),
                                  _accel.maxpool2x2_backward_np(g, idx_np, xi.shape))


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, SAMLAB_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from samlab import _accel; print(_accel.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
