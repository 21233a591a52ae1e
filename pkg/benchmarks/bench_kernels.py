"""Time the compiled kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from mvae import _kernels_py

try:
    from mvae import _kernels
except ImportError:  # extension not built
    _kernels = None


def _cases(rng: np.random.Generator):
    logits = rng.normal(size=(1000, 784))
    x = (rng.uniform(size=(1000, 784)) < 0.5).astype(np.float64)
    lse_in = rng.normal(size=(10_000, 10))
    return {
        "philox_uniform 1e6": lambda k: k.philox_uniform(7, 3, 0, 1_000_000),
        "philox_normal 1e5": lambda k: k.philox_normal(7, 3, 0, 100_000),
        "philox_normal 16 (per-call overhead)": lambda k: k.philox_normal(7, 3, 0, 16),
        "logsumexp_rows 10000x10": lambda k: k.logsumexp_rows(lse_in),
        "bernoulli_loglik 1000x784": lambda k: k.bernoulli_logit_loglik_rows(logits, x),
        "bernoulli_grad 1000x784": lambda k: k.bernoulli_logit_grad(logits, x),
    }


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':40s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases.items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if _kernels is None:
            print(f"{name:40s} {t_py:10.3f} {'n/a':>12s} {'n/a':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:40s} {t_py:10.3f} {t_c:12.3f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
