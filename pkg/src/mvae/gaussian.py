"""Diagonal Gaussian experts fused by products and quotients, plus KL and sampling helpers.

Fusion happens in precision space (T = exp(-log_var)) without any additive
epsilon; numerical safety comes from clamping log-variances to
[LOG_VAR_MIN, LOG_VAR_MAX].  All operations accept an optional leading batch
axis and act independently per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import (
    DimensionError,
    RngStream,
    Tensor,
    apply_unary,
    as_tensor,
    clip,
)

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 10.0
# raw heads above this saturate sigmoid to 1.0 in float64 and would make the
# product precision hit N - 1 exactly; keep a strict margin instead
_QUOTIENT_RAW_MAX = 25.0
_LOG_2PI = math.log(2.0 * math.pi)


class QuotientConstraintError(ValueError):
    """Numerator precision does not strictly dominate the denominator's."""

    def __init__(self, dims):
        self.dims = [tuple(int(i) for i in d) for d in dims]
        shown = ", ".join(str(d if len(d) > 1 else d[0]) for d in self.dims[:10])
        more = "" if len(self.dims) <= 10 else f" (+{len(self.dims) - 10} more)"
        super().__init__(f"quotient undefined, precision difference <= 0 at dims {shown}{more}")


class DiagGaussian:
    """N(mean, diag(exp(log_var))), log_var clamped on construction."""

    __slots__ = ("mean", "log_var")

    def __init__(self, mean, log_var):
        mean, log_var = as_tensor(mean), as_tensor(log_var)
        if mean.shape != log_var.shape or mean.ndim == 0:
            raise DimensionError(f"mean {mean.shape} and log_var {log_var.shape} must match")
        self.mean = mean
        self.log_var = clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    @classmethod
    def standard(cls, shape) -> "DiagGaussian":
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def precision(self) -> Tensor:
        return apply_unary("exp", -self.log_var)

    @property
    def var(self) -> Tensor:
        return apply_unary("exp", self.log_var)

    def __repr__(self) -> str:
        return f"DiagGaussian(mean={self.mean.data!r}, log_var={self.log_var.data!r})"


@dataclass(frozen=True)
class LatentSample:
    z: Tensor
    noise: np.ndarray
    source: DiagGaussian


def from_natural(precision: Tensor, eta: Tensor) -> DiagGaussian:
    """Gaussian with precision T and precision-weighted mean eta = T * mu."""
    return DiagGaussian(eta / precision, -apply_unary("log", precision))


def _check_dims(experts: Sequence[DiagGaussian]) -> None:
    dims = {e.dim for e in experts}
    if len(dims) > 1:
        raise DimensionError(f"experts disagree on latent dimension: {sorted(dims)}")


def product_of_experts(experts: Sequence[DiagGaussian], include_prior: bool = True,
                       dim: int | None = None) -> DiagGaussian:
    """Precision-weighted product; the prior expert N(0, I) adds 1 to each precision.

    ``dim`` (or a batch shape tuple) is required only for an empty expert list.
    """
    experts = list(experts)
    if not experts:
        if not include_prior:
            raise ValueError("product of zero experts needs the prior expert")
        if dim is None:
            raise ValueError("empty product needs dim to size the prior")
        return DiagGaussian.standard(dim)
    _check_dims(experts)
    T = experts[0].precision
    eta = experts[0].mean * T
    for e in experts[1:]:
        Ti = e.precision
        T = T + Ti
        eta = eta + e.mean * Ti
    if include_prior:
        T = T + 1.0
    return from_natural(T, eta)


def quotient_natural(T_num: Tensor, eta_num: Tensor, T_den, eta_den) -> DiagGaussian:
    T = T_num - T_den
    bad = np.argwhere(T.data <= 0.0)
    if len(bad):
        raise QuotientConstraintError(bad)
    return from_natural(T, eta_num - eta_den)


def quotient_of_experts(numerator: DiagGaussian, denominator: DiagGaussian) -> DiagGaussian:
    """numerator / denominator; requires T_num > T_den elementwise."""
    _check_dims([numerator, denominator])
    Tn, Td = numerator.precision, denominator.precision
    return quotient_natural(Tn, numerator.mean * Tn, Td, denominator.mean * Td)


def constrain_variance_for_quotient(raw, n_modalities: int) -> Tensor:
    """Log-variance of the rescaled sigmoid head V = N/(N-1) * sigmoid(raw).

    V stays strictly inside (0, N/(N-1)), so any product of up to N such experts
    has total precision above N - 1 and every quotient by prior copies exists.
    """
    if n_modalities < 2:
        raise ValueError("rescaled-sigmoid constraint needs at least 2 modalities")
    raw = clip(as_tensor(raw), -np.inf, _QUOTIENT_RAW_MAX)
    scale = math.log(n_modalities / (n_modalities - 1))
    # log sigmoid(r) = -softplus(-r)
    return scale - apply_unary("softplus", -raw)


def rsample(g: DiagGaussian, stream: RngStream | None = None, noise=None) -> LatentSample:
    """z = mean + exp(log_var / 2) * noise, noise ~ N(0, I) unless injected."""
    if noise is None:
        if stream is None:
            raise ValueError("rsample needs a stream or explicit noise")
        noise = stream.normal(g.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.shape:
        raise DimensionError(f"noise shape {noise.shape} != gaussian shape {g.shape}")
    z = g.mean + apply_unary("exp", 0.5 * g.log_var) * noise
    return LatentSample(z, noise, g)


def kl_to_standard_normal(g: DiagGaussian) -> Tensor:
    """KL[g || N(0, I)], summed over the last axis."""
    lv = g.log_var
    # expm1(lv) - lv >= 0 survives rounding where exp(lv) - lv - 1 may not
    inner = apply_unary("square", g.mean) + (apply_unary("expm1", lv) - lv)
    return 0.5 * inner.sum(axis=-1)


def log_pdf(g: DiagGaussian, z) -> Tensor:
    z = as_tensor(z)
    if z.shape[-1] != g.dim:
        raise DimensionError(f"point has length {z.shape[-1]}, gaussian has D = {g.dim}")
    sq = apply_unary("square", z - g.mean) * apply_unary("exp", -g.log_var)
    return (-0.5 * (sq + g.log_var + _LOG_2PI)).sum(axis=-1)
