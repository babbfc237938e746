"""
Core substrate: differentiation, optimization and error types.
"""
from .diffcore import (
    DTYPE,
    AdamW,
    AdamWState,
    FiniteDiffReport,
    ParamGroup,
    ParamTensor,
    accumulate_grads,
    adamw_step,
    expon_lr,
    finite_diff_check,
    param_tensor,
    value_and_grad,
)
from .errors import (
    CheckpointFormatError,
    DatasetError,
    DivergenceError,
    FrustumError,
    MosplatError,
    NonFiniteError,
    ObjectAbsent,
    ShapeMismatchError,
)

__all__ = [
    "DTYPE", "AdamW", "AdamWState", "FiniteDiffReport", "ParamGroup", "ParamTensor",
    "accumulate_grads", "adamw_step", "expon_lr", "finite_diff_check", "param_tensor",
    "value_and_grad", "CheckpointFormatError", "DatasetError", "DivergenceError",
    "FrustumError", "MosplatError", "NonFiniteError", "ObjectAbsent", "ShapeMismatchError",
]
