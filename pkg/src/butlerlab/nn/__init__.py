from .gradcheck import EvaluationError, analytic_grads, finite_diff_check
from .module import Linear, Module, uniform_fan_in
from .optim import Adam, AdamState, adam_step
from .rng import Rng
from .tensor import (
    ContractError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    backward,
    cross_entropy,
    custom,
    default_dtype,
    gelu,
    layer_norm,
    log_softmax_np,
    matmul,
    mean_all,
    mse,
    mul,
    slice_rows,
    precision,
    reshape,
    silu,
    softmax,
    softmax_rows_np,
    square,
    sub,
    sum_all,
    swap_last,
    take_rows,
    transpose,
    tune_allocator,
)

softmax_rows = softmax

__all__ = [name for name in dir() if not name.startswith("_")]
