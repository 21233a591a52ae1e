"""Kernel backend selection.

The compiled extension ``mvae._kernels`` is used when it was built and
``MVAE_PURE_PYTHON`` is unset (or ``0``).  Otherwise the numpy versions in
``mvae._kernels_py`` are used.  ``BACKEND`` names the active choice.

Determinism holds per backend: the integer RNG stream is bit-identical
across backends, float reductions may differ in the last few ulps.
"""

import os

from . import _kernels_py

_FORCE_PYTHON = os.environ.get("MVAE_PURE_PYTHON", "0") not in ("", "0")

if _FORCE_PYTHON:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

philox_blocks = _impl.philox_blocks
philox_uniform = _impl.philox_uniform
philox_normal = _impl.philox_normal
logsumexp_rows = _impl.logsumexp_rows
bernoulli_logit_loglik_rows = _impl.bernoulli_logit_loglik_rows
bernoulli_logit_grad = _impl.bernoulli_logit_grad

__all__ = [
    "BACKEND",
    "philox_blocks",
    "philox_uniform",
    "philox_normal",
    "logsumexp_rows",
    "bernoulli_logit_loglik_rows",
    "bernoulli_logit_grad",
]
