from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, NonFiniteError, Tensor


@dataclass(frozen=True)
class AdamState:
    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray

    @classmethod
    def zeros_like(cls, param) -> "AdamState":
        shape = np.shape(param.data if isinstance(param, Tensor) else param)
        return cls(0, np.zeros(shape), np.zeros(shape))


def adam_step(param, grad, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.  Returns ``(new_param, new_state)``.

    ``new_param`` has the type of ``param`` (ndarray or Tensor).
    """
    p = param.data if isinstance(param, Tensor) else np.asarray(param, dtype=np.float64)
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if p.shape != g.shape or state.first_moment.shape != p.shape:
        raise DimensionError(
            f"adam shapes disagree: param {p.shape}, grad {g.shape}, moments {state.first_moment.shape}"
        )
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("adam received a non-finite gradient")
    t = state.step + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * g
    v = beta2 * state.second_moment + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    out = Tensor._wrap(new) if isinstance(param, Tensor) else new
    return out, AdamState(t, m, v)
