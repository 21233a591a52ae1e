"""Tensors with reverse-mode gradients, plus seeded streams and Adam."""

from .optim import AdamState, adam_step
from .rng import RngStream, draw
from .tensor import (
    DimensionError,
    DomainError,
    GradTape,
    NonDeterministicError,
    NonFiniteError,
    NumericsError,
    TapeError,
    Tensor,
    apply_binary,
    apply_unary,
    as_tensor,
    backward,
    bernoulli_logit_loglik,
    clip,
    grad_check,
    log_sum_exp,
    matmul,
    reduce,
    reshape,
    scatter_rows,
    slice_last,
    take_rows,
)

__all__ = [
    "AdamState",
    "DimensionError",
    "DomainError",
    "GradTape",
    "NonDeterministicError",
    "NonFiniteError",
    "NumericsError",
    "RngStream",
    "TapeError",
    "Tensor",
    "adam_step",
    "apply_binary",
    "apply_unary",
    "as_tensor",
    "backward",
    "bernoulli_logit_loglik",
    "clip",
    "draw",
    "grad_check",
    "log_sum_exp",
    "matmul",
    "reduce",
    "reshape",
    "scatter_rows",
    "slice_last",
    "take_rows",
]
