"""Sharpness-aware minimization laboratory on a small float64 autodiff engine."""

from .nn import ModelSpec, ParamView, build_model, norm_fraction
from .optim import OptimConfig, SGDConfig, AdamWConfig, sam_step, sgd_step, lr_at
from .perturb import PerturbSpec, Scope, perturbation, scope_mask, sparsity_report
from .tensor import Tensor, apply_op, backward, grad_check

__version__ = "0.1.0"
