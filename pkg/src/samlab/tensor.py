"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small and fixed. Every op is a pair of
``forward(datas, attrs) -> (out, saved)`` and
``backward(grad_out, saved, datas, attrs, needs) -> grads``; ``needs`` marks
which inputs require a gradient so that subgraphs feeding only frozen
leaves are never differentiated.

Shape rules
-----------
matmul            [m, k] @ [k, n] -> [m, n]
conv2d_3x3        x [N, C, H, W], w [O, C, 3, 3] -> [N, O, H, W]   (stride 1, pad 1)
add, sub,
mul_elementwise   equal shapes, or b of shape [F] against a of shape [..., F]
scale             any shape, scalar attr ``c``
relu              any shape
sum, mean         attr ``axis`` (None or int)
reshape           attr ``shape`` with the same element count
transpose         attr ``axes`` permutation
max_pool2x2       [N, C, H, W] with even H, W -> [N, C, H/2, W/2]
softmax_logsumexp [N, K] -> [N]  (row-wise log-sum-exp)
batch_norm        x [N, F], gamma [F], beta [F]
layer_norm        x [N, F], gamma [F], beta [F]
l2_normalize_rows [N, K] -> [N, K]
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _accel

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """An n-d float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        # np.ascontiguousarray would promote 0-d arrays to 1-d
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.id = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad, node):
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64, order="C")
        t.requires_grad = requires_grad
        t.grad = None
        t._node = node
        t.id = next(_ids)
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return apply_op("add", self, _as_tensor(other))

    def __sub__(self, other):
        return apply_op("sub", self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply_op("scale", self, c=float(other))
        return apply_op("mul_elementwise", self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return apply_op("scale", self, c=-1.0)

    def __matmul__(self, other):
        return apply_op("matmul", self, _as_tensor(other))

    def relu(self):
        return apply_op("relu", self)

    def sum(self, axis=None):
        return apply_op("sum", self, axis=axis)

    def mean(self, axis=None):
        return apply_op("mean", self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_op("reshape", self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply_op("transpose", self, axes=tuple(axes) if axes else None)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    """One executed op: inputs, output, and what backward needs."""

    kind: str
    inputs: tuple
    output_id: int
    saved: dict
    attrs: dict


# --------------------------------------------------------------------------
# op kernels

def _broadcast_ok(a, b):
    return a.shape == b.shape or (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0])


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[0]).sum(axis=0)


def _check_binary(kind, a, b):
    if not _broadcast_ok(a, b):
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _fw_add(d, at):
    _check_binary("add", *d)
    return d[0] + d[1], None


def _bw_add(g, s, d, at, needs):
    return (g if needs[0] else None, _reduce_to(g, d[1].shape) if needs[1] else None)


def _fw_sub(d, at):
    _check_binary("sub", *d)
    return d[0] - d[1], None


def _bw_sub(g, s, d, at, needs):
    return (g if needs[0] else None, -_reduce_to(g, d[1].shape) if needs[1] else None)


def _fw_mul(d, at):
    _check_binary("mul_elementwise", *d)
    return d[0] * d[1], None


def _bw_mul(g, s, d, at, needs):
    ga = g * d[1] if needs[0] else None
    gb = _reduce_to(g * d[0], d[1].shape) if needs[1] else None
    return ga, gb


def _fw_scale(d, at):
    return d[0] * at["c"], None


def _bw_scale(g, s, d, at, needs):
    return (g * at["c"],)


def _fw_matmul(d, at):
    a, b = d
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, None


def _bw_matmul(g, s, d, at, needs):
    a, b = d
    return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


def _fw_relu(d, at):
    return np.maximum(d[0], 0.0), None


def _bw_relu(g, s, d, at, needs):
    return (g * (d[0] > 0),)


def _fw_sum(d, at):
    axis = at.get("axis")
    x = d[0]
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {x.shape}")
    return np.sum(x, axis=axis), None


def _bw_sum(g, s, d, at, needs):
    x = d[0]
    axis = at.get("axis")
    if axis is None:
        return (np.full(x.shape, np.asarray(g).reshape(-1)[0]),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _fw_mean(d, at):
    axis = at.get("axis")
    x = d[0]
    if x.size == 0:
        raise ShapeError("mean: empty input")
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {x.shape}")
    return np.mean(x, axis=axis), None


def _bw_mean(g, s, d, at, needs):
    x = d[0]
    axis = at.get("axis")
    n = x.size if axis is None else x.shape[axis]
    (gx,) = _bw_sum(g, s, d, at, needs)
    return (gx / n,)


def _fw_reshape(d, at):
    x = d[0]
    shape = tuple(at["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return x.reshape(shape), None


def _bw_reshape(g, s, d, at, needs):
    return (g.reshape(d[0].shape),)


def _fw_transpose(d, at):
    x = d[0]
    axes = at.get("axes")
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
        at["axes"] = axes
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    return np.ascontiguousarray(x.transpose(axes)), None


def _bw_transpose(g, s, d, at, needs):
    return (g.transpose(np.argsort(at["axes"])),)


def _fw_conv(d, at):
    x, w = d
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d_3x3: incompatible shapes {x.shape} and {w.shape}")
    return _accel.conv3x3_forward(x, w), None


def _bw_conv(g, s, d, at, needs):
    x, w = d
    g = np.ascontiguousarray(g)
    gx = _accel.conv3x3_backward_input(g, w) if needs[0] else None
    gw = _accel.conv3x3_backward_weight(g, x) if needs[1] else None
    return gx, gw


def _fw_pool(d, at):
    x = d[0]
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"max_pool2x2: needs [N, C, even H, even W], got {x.shape}")
    out, idx = _accel.maxpool2x2_forward(x)
    return out, {"idx": idx}


def _bw_pool(g, s, d, at, needs):
    return (_accel.maxpool2x2_backward(np.ascontiguousarray(g), s["idx"], d[0].shape),)


def _fw_lse(d, at):
    z = d[0]
    if z.ndim != 2:
        raise ShapeError(f"softmax_logsumexp: needs [N, K], got {z.shape}")
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    return (np.log(se) + zmax)[:, 0], {"softmax": e / se}


def _bw_lse(g, s, d, at, needs):
    return (g[:, None] * s["softmax"],)


def _fw_batch_norm(d, at):
    x, gamma, beta = d
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"batch_norm: feature mismatch between x {x.shape}, "
            f"gamma {gamma.shape} and beta {beta.shape}")
    eps = at["eps"]
    if at["train"]:
        if x.shape[0] < 2:
            raise ShapeError(f"batch_norm: train mode needs batch >= 2, got {x.shape}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
    else:
        mu = at["running_mean"]
        var = at["running_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, {"xhat": xhat, "inv_std": inv_std}


def _bw_batch_norm(g, s, d, at, needs):
    x, gamma, beta = d
    xhat, inv_std = s["xhat"], s["inv_std"]
    gx = None
    if needs[0]:
        gxhat = g * gamma
        if at["train"]:
            n = x.shape[0]
            gx = (inv_std / n) * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        else:
            gx = gxhat * inv_std
    ggamma = (g * xhat).sum(axis=0) if needs[1] else None
    gbeta = g.sum(axis=0) if needs[2] else None
    return gx, ggamma, gbeta


def _fw_layer_norm(d, at):
    x, gamma, beta = d
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm: feature mismatch between x {x.shape}, "
            f"gamma {gamma.shape} and beta {beta.shape}")
    if x.shape[1] < 2:
        raise ShapeError(f"layer_norm: needs at least 2 features, got {x.shape}")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + at["eps"])
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, {"xhat": xhat, "inv_std": inv_std}


def _bw_layer_norm(g, s, d, at, needs):
    x, gamma, beta = d
    xhat, inv_std = s["xhat"], s["inv_std"]
    gx = None
    if needs[0]:
        f = x.shape[1]
        gxhat = g * gamma
        gx = (inv_std / f) * (
            f * gxhat
            - gxhat.sum(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=1, keepdims=True))
    ggamma = (g * xhat).sum(axis=0) if needs[1] else None
    gbeta = g.sum(axis=0) if needs[2] else None
    return gx, ggamma, gbeta


_NORM_GUARD = 1e-12


def _fw_l2n(d, at):
    z = d[0]
    if z.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: needs [N, K], got {z.shape}")
    norm = np.sqrt((z * z).sum(axis=1, keepdims=True))
    denom = norm + _NORM_GUARD
    return z / denom, {"norm": norm, "denom": denom}


def _bw_l2n(g, s, d, at, needs):
    z = d[0]
    norm, denom = s["norm"], s["denom"]
    proj = (g * z).sum(axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    coef = np.where(norm > 0, proj / (safe * denom * denom), 0.0)
    return (g / denom - coef * z,)


_OPS = {
    "matmul": (2, _fw_matmul, _bw_matmul),
    "conv2d_3x3": (2, _fw_conv, _bw_conv),
    "add": (2, _fw_add, _bw_add),
    "sub": (2, _fw_sub, _bw_sub),
    "mul_elementwise": (2, _fw_mul, _bw_mul),
    "scale": (1, _fw_scale, _bw_scale),
    "relu": (1, _fw_relu, _bw_relu),
    "mean": (1, _fw_mean, _bw_mean),
    "sum": (1, _fw_sum, _bw_sum),
    "reshape": (1, _fw_reshape, _bw_reshape),
    "transpose": (1, _fw_transpose, _bw_transpose),
    "max_pool2x2": (1, _fw_pool, _bw_pool),
    "softmax_logsumexp": (1, _fw_lse, _bw_lse),
    "batch_norm": (3, _fw_batch_norm, _bw_batch_norm),
    "layer_norm": (3, _fw_layer_norm, _bw_layer_norm),
    "l2_normalize_rows": (1, _fw_l2n, _bw_l2n),
}

OP_KINDS = tuple(_OPS)


def apply_op(kind, *inputs, **attrs):
    """Run one op; record it for backward when any input requires grad."""
    try:
        arity, fw, _ = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if len(inputs) != arity:
        raise ShapeError(f"{kind}: expected {arity} inputs, got {len(inputs)}")
    inputs = tuple(_as_tensor(t) for t in inputs)
    datas = tuple(t.data for t in inputs)
    for t in inputs:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{kind}: non-finite value in input of shape {t.shape}")
    out, saved = fw(datas, attrs)
    requires = any(t.requires_grad for t in inputs)
    node = None
    if requires:
        node = Record(kind, inputs, -1, saved or {}, attrs)
    result = Tensor._wrap(out, requires, node)
    if node is not None:
        node.output_id = result.id
    return result


# --------------------------------------------------------------------------
# tape + backward

@dataclass
class Tape:
    """Records reachable from one output, in execution (topological) order."""

    records: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if t.id in seen or t._node is None:
                continue
            seen.add(t.id)
            stack.append((t, True))
            for parent in reversed(t._node.inputs):
                if parent._node is not None and parent.id not in seen:
                    stack.append((parent, False))
        # node ids grow with creation time, so this is also execution order
        order.sort(key=lambda t: t.id)
        return cls([t._node for t in order], order)

    def run_backward(self, seed_grad):
        grads = {self.outputs[-1].id: seed_grad}
        leaf_grads = {}
        for rec, out in zip(reversed(self.records), reversed(self.outputs)):
            g = grads.pop(out.id, None)
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in rec.inputs)
            _, _, bw = _OPS[rec.kind]
            in_grads = bw(g, rec.saved, tuple(t.data for t in rec.inputs), rec.attrs, needs)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                target = grads if t._node is not None else leaf_grads
                if t.id in target:
                    target[t.id] = target[t.id] + gi
                else:
                    target[t.id] = np.asarray(gi, dtype=np.float64)
        return leaf_grads


def backward(loss, wrt=None):
    """Backpropagate from a scalar ``loss``.

    Sets ``.grad`` on every reachable leaf that requires grad and returns a
    map from tensor id to gradient array. Leaves passed in ``wrt`` that the
    loss does not reach get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    if loss._node is None:
        leaf_grads = {loss.id: np.ones_like(loss.data)}
    else:
        tape = Tape.from_output(loss)
        leaf_grads = tape.run_backward(np.ones_like(loss.data))
        leaves = {t.id: t for rec in tape.records for t in rec.inputs if t._node is None}
        for tid, g in leaf_grads.items():
            leaf = leaves[tid]
            leaf_grads[tid] = np.ascontiguousarray(np.reshape(g, leaf.shape))
            leaf.grad = leaf_grads[tid]
    if wrt is not None:
        for t in wrt:
            if t.id not in leaf_grads:
                leaf_grads[t.id] = np.zeros(t.shape)
                if t.requires_grad:
                    t.grad = leaf_grads[t.id]
    return leaf_grads


# --------------------------------------------------------------------------
# finite-difference check

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple
    autodiff: np.ndarray
    numeric: np.ndarray


def grad_check(function, point, fd_step=1e-5):
    """Compare autodiff against central differences at ``point``.

    ``function`` maps a Tensor to a scalar Tensor. The error per coordinate is
    ``|autodiff - fd| / max(1, |fd|)``.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    w = Tensor(base, requires_grad=True)
    out = function(w)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: function must be scalar-valued, got shape {out.shape}")
    grads = backward(out, wrt=[w])
    ad = grads[w.id]
    fd = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += fd_step
        minus[i] -= fd_step
        fp = function(Tensor(plus.reshape(base.shape))).data.reshape(-1)[0]
        fm = function(Tensor(minus.reshape(base.shape))).data.reshape(-1)[0]
        fd.reshape(-1)[i] = (fp - fm) / (2.0 * fd_step)
    err = np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
    return GradCheckReport(float(err.max()) if err.size else 0.0, worst, ad, fd)


# functional aliases used by the nn layer code
def matmul(a, b):
    return apply_op("matmul", a, b)


def conv2d_3x3(x, w):
    return apply_op("conv2d_3x3", x, w)


def relu(x):
    return apply_op("relu", x)


def max_pool2x2(x):
    return apply_op("max_pool2x2", x)


def logsumexp(z):
    return apply_op("softmax_logsumexp", z)
