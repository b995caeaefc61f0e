"""Minimal float64 tensor library with reverse-mode differentiation."""

from . import ops
from .ops import (
    LAYER_NORM_EPS,
    concat,
    conv1d_grouped,
    cosine_similarity,
    exp,
    gelu,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    log_sum_exp,
    matmul,
    relu,
    softmax,
    sqrt,
    stack,
    standardize,
)
from .gradcheck import GradCheckResult, check_gradients, numeric_grad, overall_relative_error
from .rng import derive_key, stream
from .tensor import (
    ConfigurationError,
    DegenerateInputError,
    NumericalError,
    ShapeError,
    Tape,
    Tensor,
    UsageError,
    as_tensor,
    grad_enabled,
    no_grad,
)

__all__ = [
    "ConfigurationError", "DegenerateInputError", "GradCheckResult", "check_gradients",
    "numeric_grad", "overall_relative_error", "LAYER_NORM_EPS", "NumericalError",
    "ShapeError", "Tape", "Tensor", "UsageError", "as_tensor", "concat", "conv1d_grouped",
    "cosine_similarity", "derive_key", "exp", "gelu", "grad_enabled", "l2_normalize",
    "layer_norm", "log", "log_softmax", "log_sum_exp", "matmul", "no_grad", "ops", "relu",
    "softmax", "sqrt", "stack", "standardize", "stream",
]
