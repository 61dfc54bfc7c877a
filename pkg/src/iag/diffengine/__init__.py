"""Dense-tensor numerics: checked ops, gradients, AdamW, checkpoints."""
from . import checkpoint, ops
from .autodiff import (
    GradCheckReport,
    GraphConsumedError,
    backward,
    grad_check,
    numerical_grad,
    set_deterministic,
    set_precision,
)
from .ops import NonFiniteError, ShapeError
from .optim import AdamW, linear_warmup, warmup_steps

__all__ = [
    "AdamW",
    "GradCheckReport",
    "GraphConsumedError",
    "NonFiniteError",
    "ShapeError",
    "backward",
    "checkpoint",
    "grad_check",
    "linear_warmup",
    "numerical_grad",
    "ops",
    "set_deterministic",
    "set_precision",
    "warmup_steps",
]
