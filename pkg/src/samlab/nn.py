"""Layers, losses, miniature models and the tagged parameter registry.

A model owns one flat float64 parameter vector. Every slice of it is
described by a :class:`ParamView` whose ``tag`` (``norm_weight``,
``norm_bias``, ``weight`` or ``bias``) is what the perturbation masks key on.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .rng import STREAM_INIT, make_rng
from .tensor import Tensor, apply_op, backward

TAGS = ("norm_weight", "norm_bias", "weight", "bias")
NORM_TAGS = ("norm_weight", "norm_bias")
ARCHITECTURES = ("mlp_bn", "mlp_ln", "mini_conv_bn")
TRAINABLE_SCOPES = ("all", "fix_norm", "only_norm")


@dataclass(frozen=True)
class ParamView:
    param_id: str
    offset: int
    length: int
    shape: tuple
    tag: str
    layer_id: int
    layer_group_id: int

    @property
    def stop(self):
        return self.offset + self.length

    @property
    def is_norm(self):
        return self.tag in NORM_TAGS


@dataclass
class NormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        if self.running_mean.shape != self.running_var.shape or self.running_mean.ndim != 1:
            raise ValueError("running_mean and running_var must be 1-d of equal length")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {self.momentum}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def fresh(cls, features, momentum=0.1, epsilon=1e-5):
        return cls(np.zeros(features), np.ones(features), momentum, epsilon)

    def to_dict(self):
        return {"running_mean": self.running_mean.tolist(),
                "running_var": self.running_var.tolist(),
                "momentum": self.momentum, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d):
        return cls(d["running_mean"], d["running_var"], d["momentum"], d["epsilon"])


@dataclass
class ModelSpec:
    """Architecture plus trainability switches.

    ``dims`` is the full width list for the MLPs (input first, classes last).
    ``mini_conv_bn`` uses ``channels`` (two conv widths), ``input_shape``
    ``[C, H, W]`` and ``num_classes``.
    """

    architecture: str
    dims: list | None = None
    channels: list | None = None
    input_shape: list | None = None
    num_classes: int | None = None
    norm_affine_enabled: bool = True
    trainable_scope: str = "all"
    bn_momentum: float = 0.1
    norm_eps: float = 1e-5

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.trainable_scope not in TRAINABLE_SCOPES:
            raise ValueError(f"unknown trainable_scope {self.trainable_scope!r}")
        if self.architecture in ("mlp_bn", "mlp_ln"):
            if not self.dims or len(self.dims) < 2 or min(self.dims) < 1:
                raise ValueError(f"{self.architecture} needs at least two positive dims")
        else:
            if not self.channels or len(self.channels) != 2 or min(self.channels) < 1:
                raise ValueError("mini_conv_bn needs two positive channel widths")
            if not self.input_shape or len(self.input_shape) != 3:
                raise ValueError("mini_conv_bn needs input_shape [C, H, W]")
            if self.input_shape[1] % 2 or self.input_shape[2] % 2:
                raise ValueError("mini_conv_bn needs even spatial dims for the 2x2 pool")
            if not self.num_classes or self.num_classes < 2:
                raise ValueError("mini_conv_bn needs num_classes >= 2")
        return self

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


# --------------------------------------------------------------------------
# functional layers

def batch_norm_forward(x, gamma, beta, state, mode="train", update_stats=True):
    """BatchNorm over the batch axis of ``x`` ([batch, features]).

    Train mode normalizes with the biased batch variance and, when
    ``update_stats`` is set, folds the batch statistics into ``state``
    (running_var uses the unbiased estimate). Eval mode reads the running
    statistics and leaves ``state`` untouched.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    gamma = gamma if isinstance(gamma, Tensor) else Tensor(gamma)
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    if state.running_mean.shape != (x.shape[-1],):
        raise ValueError(
            f"batch_norm: state has {state.running_mean.shape[0]} features, x has {x.shape}")
    train = mode == "train"
    out = apply_op("batch_norm", x, gamma, beta, train=train, eps=state.epsilon,
                   running_mean=state.running_mean, running_var=state.running_var)
    if train and update_stats:
        n = x.shape[0]
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0) * (n / (n - 1))
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var
    return out


def layer_norm_forward(x, gamma, beta, epsilon=1e-5):
    x = x if isinstance(x, Tensor) else Tensor(x)
    return apply_op("layer_norm", x, gamma, beta, eps=epsilon)


def _bn_spatial(x, gamma, beta, state, mode, update_stats):
    n, c, h, w = x.shape
    flat = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    out = batch_norm_forward(flat, gamma, beta, state, mode, update_stats)
    return out.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def cross_entropy_ls(logits, targets, smoothing=0.0, logit_normalize=False):
    """Mean label-smoothed cross-entropy.

    The target distribution puts ``1 - smoothing`` on the true class plus
    ``smoothing / classes`` on every class. With ``logit_normalize`` each row
    of logits is first divided by its l2 norm.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    n, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ValueError(f"cross_entropy_ls: {targets.shape[0]} targets for batch of {n}")
    if n < 1:
        raise ValueError("cross_entropy_ls: empty batch")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"cross_entropy_ls: target out of range [0, {k})")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    z = apply_op("l2_normalize_rows", logits) if logit_normalize else logits
    q = np.full((n, k), smoothing / k)
    q[np.arange(n), targets] += 1.0 - smoothing
    lse = apply_op("softmax_logsumexp", z)
    picked = apply_op("sum", apply_op("mul_elementwise", z, Tensor(q)), axis=1)
    return apply_op("mean", apply_op("sub", lse, picked))


# --------------------------------------------------------------------------
# models

@dataclass
class _Layer:
    kind: str  # linear | conv | bn | bn2d | ln | relu | pool | flatten
    layer_id: int
    params: dict = field(default_factory=dict)  # role -> ParamView
    state_index: int | None = None


class Model:
    """A built miniature network over one flat parameter vector."""

    def __init__(self, spec, layers, registry, params, norm_states):
        self.spec = spec
        self.layers = layers
        self.registry = registry
        self.params = params
        self.norm_states = norm_states
        self._norm_cache = None

    @property
    def num_params(self):
        return int(self.params.size)

    def clone(self):
        return Model(self.spec, self.layers, self.registry, self.params.copy(),
                     copy.deepcopy(self.norm_states))

    # masks over the flat vector ------------------------------------------
    def tag_mask(self, tags):
        mask = np.zeros(self.num_params, dtype=bool)
        for v in self.registry:
            if v.tag in tags:
                mask[v.offset:v.stop] = True
        return mask

    def norm_mask(self):
        if self._norm_cache is None:
            self._norm_cache = self.tag_mask(NORM_TAGS)
        return self._norm_cache

    def trainable_mask(self):
        scope = self.spec.trainable_scope
        if scope == "all":
            return np.ones(self.num_params, dtype=bool)
        if scope == "fix_norm":
            return ~self.norm_mask()
        return self.norm_mask().copy()

    # forward / gradients ----------------------------------------------------
    def forward(self, x, params=None, mode="train", update_stats=True, grad_mask=None):
        """Return ``(logits, leaves)``; ``leaves`` maps param_id to its leaf Tensor.

        Only parameter tensors overlapping ``grad_mask`` (all when ``None``)
        require grad, so the tape never differentiates into frozen subgraphs.
        """
        w = self.params if params is None else params
        leaves = {}
        for v in self.registry:
            need = True if grad_mask is None else bool(grad_mask[v.offset:v.stop].any())
            leaves[v.param_id] = Tensor(w[v.offset:v.stop].reshape(v.shape), requires_grad=need)
        h = Tensor(np.asarray(x, dtype=np.float64))
        if self.spec.architecture == "mini_conv_bn":
            h = Tensor(h.data.reshape((h.shape[0],) + tuple(self.spec.input_shape)))
        for layer in self.layers:
            h = self._apply(layer, h, leaves, mode, update_stats)
        return h, leaves

    def _affine(self, layer, leaves, features):
        if "gamma" in layer.params:
            return leaves[layer.params["gamma"].param_id], leaves[layer.params["beta"].param_id]
        return Tensor(np.ones(features)), Tensor(np.zeros(features))

    def _apply(self, layer, h, leaves, mode, update_stats):
        k = layer.kind
        if k == "linear":
            h = apply_op("matmul", h, leaves[layer.params["weight"].param_id])
            return apply_op("add", h, leaves[layer.params["bias"].param_id])
        if k == "conv":
            return apply_op("conv2d_3x3", h, leaves[layer.params["weight"].param_id])
        if k == "relu":
            return apply_op("relu", h)
        if k == "pool":
            return apply_op("max_pool2x2", h)
        if k == "flatten":
            return h.reshape(h.shape[0], int(np.prod(h.shape[1:])))
        state = self.norm_states[layer.state_index] if layer.state_index is not None else None
        if k == "bn":
            g, b = self._affine(layer, leaves, h.shape[1])
            return batch_norm_forward(h, g, b, state, mode, update_stats)
        if k == "bn2d":
            g, b = self._affine(layer, leaves, h.shape[1])
            return _bn_spatial(h, g, b, state, mode, update_stats)
        if k == "ln":
            g, b = self._affine(layer, leaves, h.shape[1])
            return layer_norm_forward(h, g, b, self.spec.norm_eps)
        raise ValueError(f"unknown layer kind {k!r}")

    def loss_grad(self, x, y, params=None, smoothing=0.0, logit_normalize=False,
                  mode="train", update_stats=False, grad_mask=None):
        """Loss value and its flat gradient at ``params`` (default: own params).

        Coordinates whose parameter tensor is excluded by ``grad_mask`` get a
        zero gradient without being computed.
        """
        logits, leaves = self.forward(x, params, mode, update_stats, grad_mask)
        loss = cross_entropy_ls(logits, y, smoothing, logit_normalize)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value}")
        grad = np.zeros(self.num_params)
        if loss.requires_grad:
            grads = backward(loss)
            for v in self.registry:
                leaf = leaves[v.param_id]
                g = grads.get(leaf.id)
                if g is not None:
                    grad[v.offset:v.stop] = g.reshape(-1)
        return value, grad

    def loss(self, x, y, params=None, smoothing=0.0, logit_normalize=False, mode="eval"):
        out, _ = self.forward(x, params, mode, update_stats=False,
                              grad_mask=np.zeros(self.num_params, dtype=bool))
        return float(cross_entropy_ls(out, y, smoothing, logit_normalize).data)

    def predict(self, x, mode="eval"):
        out, _ = self.forward(x, mode=mode, update_stats=False,
                              grad_mask=np.zeros(self.num_params, dtype=bool))
        return out.data

    def norm_state_dicts(self):
        return [s.to_dict() for s in self.norm_states]


class _Builder:
    def __init__(self, spec, rng):
        self.spec = spec
        self.rng = rng
        self.registry = []
        self.chunks = []
        self.offset = 0
        self.group = 0
        self.layers = []
        self.norm_states = []

    def _param(self, layer, role, name, shape, tag, init):
        n = int(np.prod(shape))
        view = ParamView(name, self.offset, n, tuple(shape), tag, layer.layer_id, self.group)
        self.group += 1
        self.offset += n
        self.registry.append(view)
        self.chunks.append(np.asarray(init, dtype=np.float64).reshape(-1))
        layer.params[role] = view

    def _he(self, fan_in, shape):
        bound = np.sqrt(6.0 / fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def linear(self, din, dout):
        layer = _Layer("linear", len(self.layers))
        i = layer.layer_id
        self._param(layer, "weight", f"{i}.linear.weight", (din, dout), "weight",
                    self._he(din, (din, dout)))
        self._param(layer, "bias", f"{i}.linear.bias", (dout,), "bias", np.zeros(dout))
        self.layers.append(layer)

    def conv(self, cin, cout):
        layer = _Layer("conv", len(self.layers))
        i = layer.layer_id
        self._param(layer, "weight", f"{i}.conv.weight", (cout, cin, 3, 3), "weight",
                    self._he(cin * 9, (cout, cin, 3, 3)))
        self.layers.append(layer)

    def norm(self, kind, features):
        layer = _Layer(kind, len(self.layers))
        i = layer.layer_id
        if self.spec.norm_affine_enabled:
            self._param(layer, "gamma", f"{i}.{kind}.gamma", (features,), "norm_weight",
                        np.ones(features))
            self._param(layer, "beta", f"{i}.{kind}.beta", (features,), "norm_bias",
                        np.zeros(features))
        if kind in ("bn", "bn2d"):
            layer.state_index = len(self.norm_states)
            self.norm_states.append(
                NormState.fresh(features, self.spec.bn_momentum, self.spec.norm_eps))
        self.layers.append(layer)

    def plain(self, kind):
        self.layers.append(_Layer(kind, len(self.layers)))

    def finish(self):
        params = np.concatenate(self.chunks) if self.chunks else np.zeros(0)
        return Model(self.spec, self.layers, self.registry, params, self.norm_states)


def build_model(spec, seed=0):
    """Deterministically initialise ``spec`` from ``seed``.

    Weights are He-uniform, biases zero, gamma one and beta zero. The MLPs put
    a norm layer and ReLU after every hidden linear layer; ``mini_conv_bn`` is
    conv-BN-ReLU, conv-BN-ReLU, 2x2 max-pool, linear.
    """
    if isinstance(spec, dict):
        spec = ModelSpec(**spec)
    spec.validate()
    b = _Builder(spec, make_rng(seed, STREAM_INIT))
    if spec.architecture in ("mlp_bn", "mlp_ln"):
        norm_kind = "bn" if spec.architecture == "mlp_bn" else "ln"
        dims = list(spec.dims)
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            b.linear(din, dout)
            if i < len(dims) - 2:
                b.norm(norm_kind, dout)
                b.plain("relu")
    else:
        cin, h, w = spec.input_shape
        c1, c2 = spec.channels
        b.conv(cin, c1)
        b.norm("bn2d", c1)
        b.plain("relu")
        b.conv(c1, c2)
        b.norm("bn2d", c2)
        b.plain("relu")
        b.plain("pool")
        b.plain("flatten")
        b.linear(c2 * (h // 2) * (w // 2), spec.num_classes)
    model = b.finish()
    check_partition(model.registry, model.num_params)
    return model


def check_partition(registry, total):
    """Raise unless the views tile ``[0, total)`` exactly, in order."""
    pos = 0
    for v in sorted(registry, key=lambda v: v.offset):
        if v.offset != pos:
            raise ValueError(f"registry gap or overlap at offset {pos} ({v.param_id})")
        if v.tag not in TAGS:
            raise ValueError(f"unknown tag {v.tag!r} on {v.param_id}")
        pos = v.stop
    if pos != total:
        raise ValueError(f"registry covers {pos} of {total} parameters")


def norm_fraction(registry):
    total = sum(v.length for v in registry)
    if total == 0:
        raise ValueError("empty registry")
    return sum(v.length for v in registry if v.is_norm) / total
