"""Hot kernels for the 3x3 convolution and 2x2 max-pool.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The numba path is used when numba imports cleanly and the environment
variable ``SAMLAB_DISABLE_NUMBA`` is unset (or ``0``). Both paths are
deterministic; they agree to rounding, not bitwise.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DISABLED = os.environ.get("SAMLAB_DISABLE_NUMBA", "0") not in ("", "0")

try:
    if _DISABLED:
        raise ImportError("numba disabled by SAMLAB_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


def backend():
    return "numba" if HAS_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy reference path

def conv3x3_forward_np(x, w):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # [N, C, H, W, 3, 3]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [N, H, W, O]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv3x3_backward_input_np(dy, w):
    dyp = np.pad(dy, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(dyp, (3, 3), axis=(2, 3))  # [N, O, H, W, 3, 3]
    wf = w[:, :, ::-1, ::-1]
    dx = np.tensordot(win, wf, axes=([1, 4, 5], [0, 2, 3]))  # [N, H, W, C]
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def conv3x3_backward_weight_np(dy, x):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # [N, C, H, W, 3, 3]
    return np.ascontiguousarray(np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3])))


def maxpool2x2_forward_np(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum, matching the strict '>' scan below
    idx = np.argmax(blocks, axis=-1).astype(np.int64)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward_np(dy, idx, in_shape):
    n, c, h, w = in_shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(blocks.reshape(n, c, h, w))


# --------------------------------------------------------------------------
# numba path

if HAS_NUMBA:

    # Convolutions go through im2col: numba builds (or scatters) the patch
    # matrix cols[C*9, N*H*W] in one pass and the product runs in BLAS.

    @njit(cache=True)
    def _im2col_nb(x):
        n_, c_, h_, w_ = x.shape
        hw = h_ * w_
        cols = np.zeros((c_ * 9, n_ * hw))
        for c in range(c_):
            for kh in range(3):
                i0, i1 = max(0, 1 - kh), min(h_, h_ + 1 - kh)
                for kw in range(3):
                    j0, j1 = max(0, 1 - kw), min(w_, w_ + 1 - kw)
                    r = c * 9 + kh * 3 + kw
                    for n in range(n_):
                        base = n * hw
                        for i in range(i0, i1):
                            ii = i + kh - 1
                            for j in range(j0, j1):
                                cols[r, base + i * w_ + j] = x[n, c, ii, j + kw - 1]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n_, c_, h_, w_):
        hw = h_ * w_
        dx = np.zeros((n_, c_, h_, w_))
        for c in range(c_):
            for kh in range(3):
                i0, i1 = max(0, 1 - kh), min(h_, h_ + 1 - kh)
                for kw in range(3):
                    j0, j1 = max(0, 1 - kw), min(w_, w_ + 1 - kw)
                    r = c * 9 + kh * 3 + kw
                    for n in range(n_):
                        base = n * hw
                        for i in range(i0, i1):
                            ii = i + kh - 1
                            for j in range(j0, j1):
                                dx[n, c, ii, j + kw - 1] += cols[r, base + i * w_ + j]
        return dx

    @njit(cache=True)
    def _to_channel_rows(a):
        # [N, O, H, W] -> [O, N*H*W]
        n_, o_, h_, w_ = a.shape
        hw = h_ * w_
        out = np.empty((o_, n_ * hw))
        for n in range(n_):
            for o in range(o_):
                out[o, n * hw:(n + 1) * hw] = a[n, o].ravel()
        return out

    @njit(cache=True)
    def _from_channel_rows(m, n_, h_, w_):
        o_ = m.shape[0]
        hw = h_ * w_
        out = np.empty((n_, o_, h_, w_))
        for n in range(n_):
            for o in range(o_):
                out[n, o] = m[o, n * hw:(n + 1) * hw].reshape(h_, w_)
        return out

    @njit(cache=True)
    def _conv3x3_forward_nb(x, w):
        n_, c_, h_, w_ = x.shape
        wm = np.ascontiguousarray(w.reshape(w.shape[0], c_ * 9))
        return _from_channel_rows(np.dot(wm, _im2col_nb(x)), n_, h_, w_)

    @njit(cache=True)
    def _conv3x3_backward_input_nb(dy, w):
        n_, o_, h_, w_ = dy.shape
        c_ = w.shape[1]
        wt = np.ascontiguousarray(w.reshape(o_, c_ * 9).T)
        return _col2im_nb(np.dot(wt, _to_channel_rows(dy)), n_, c_, h_, w_)

    @njit(cache=True)
    def _conv3x3_backward_weight_nb(dy, x):
        o_ = dy.shape[1]
        c_ = x.shape[1]
        cols_t = _im2col_nb(x).T  # F-ordered view; BLAS takes the transpose flag
        return np.dot(_to_channel_rows(dy), cols_t).reshape(o_, c_, 3, 3)

    @njit(cache=True)
    def _maxpool2x2_forward_nb(x):
        n_, c_, h_, w_ = x.shape
        out = np.empty((n_, c_, h_ // 2, w_ // 2))
        idx = np.empty((n_, c_, h_ // 2, w_ // 2), dtype=np.int64)
        for n in range(n_):
            for c in range(c_):
                for i in range(h_ // 2):
                    for j in range(w_ // 2):
                        best = x[n, c, 2 * i, 2 * j]
                        arg = 0
                        for k in range(1, 4):
                            v = x[n, c, 2 * i + k // 2, 2 * j + k % 2]
                            if v > best:
                                best = v
                                arg = k
                        out[n, c, i, j] = best
                        idx[n, c, i, j] = arg
        return out, idx

    @njit(cache=True)
    def _maxpool2x2_backward_nb(dy, idx, dx):
        n_, c_, ho, wo = dy.shape
        for n in range(n_):
            for c in range(c_):
                for i in range(ho):
                    for j in range(wo):
                        k = idx[n, c, i, j]
                        dx[n, c, 2 * i + k // 2, 2 * j + k % 2] = dy[n, c, i, j]
        return dx

    def conv3x3_forward(x, w):
        return _conv3x3_forward_nb(x, w)

    def conv3x3_backward_input(dy, w):
        return _conv3x3_backward_input_nb(dy, w)

    def conv3x3_backward_weight(dy, x):
        return _conv3x3_backward_weight_nb(dy, x)

    def maxpool2x2_forward(x):
        return _maxpool2x2_forward_nb(x)

    def maxpool2x2_backward(dy, idx, in_shape):
        return _maxpool2x2_backward_nb(dy, idx, np.zeros(in_shape))

else:
    conv3x3_forward = conv3x3_forward_np
    conv3x3_backward_input = conv3x3_backward_input_np
    conv3x3_backward_weight = conv3x3_backward_weight_np
    maxpool2x2_forward = maxpool2x2_forward_np
    maxpool2x2_backward = maxpool2x2_backward_np
