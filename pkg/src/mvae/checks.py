"""Fast self-checks against independent oracles (run by ``mvae check``)."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .data import LinearGaussianSpec, linear_gaussian_dataset, linear_gaussian_model, shift_proposal
from .evaluation import estimate_log_conditional, estimate_log_joint, estimate_log_marginal
from .gaussian import DiagGaussian, kl_to_standard_normal, product_of_experts, quotient_of_experts
from .model import (
    ModalitySpec,
    MultimodalBatch,
    MvaeModel,
    count_inference_parameters,
    elbo_subset,
    reference_mnist_model,
)
from .numerics import RngStream, apply_unary, grad_check, log_sum_exp


def _normal_pdf(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)


def check_poe_grid(poe: Callable = product_of_experts, n_sets: int = 100, seed: int = 11) -> tuple[bool, str]:
    """Normalised pointwise product on a grid vs the returned Gaussian, L1 < 1e-3."""
    s = RngStream(seed, stream_id=1)
    grid = np.linspace(-12.0, 12.0, 24001)
    dx = grid[1] - grid[0]
    worst = 0.0
    for t in range(n_sets):
        u = s.uniform(3)
        size = 1 + int(u[0] * 5)
        means = 4.0 * s.uniform(size) - 2.0
        log_vars = 3.0 * s.uniform(size) - 1.5
        prior = bool(t % 2)
        experts = [DiagGaussian([m], [lv]) for m, lv in zip(means, log_vars)]
        out = poe(experts, include_prior=prior)
        log_dens = sum(-0.5 * (grid - m) ** 2 / math.exp(lv) for m, lv in zip(means, log_vars))
        if prior:
            log_dens = log_dens - 0.5 * grid**2
        dens = np.exp(log_dens - log_dens.max())
        dens /= dens.sum() * dx
        ref = _normal_pdf(grid, out.mean.data[0], out.var.data[0])
        worst = max(worst, float(np.abs(dens - ref).sum() * dx))
    return worst < 1e-3, f"max L1 {worst:.2e}"


def check_qoe_inversion(n_pairs: int = 1000, seed: int = 12) -> tuple[bool, str]:
    s = RngStream(seed, stream_id=2)
    worst = 0.0
    for _ in range(n_pairs):
        mp, mq = 6.0 * s.uniform(3) - 3.0, 6.0 * s.uniform(3) - 3.0
        lp, lq = 4.0 * s.uniform(3) - 2.0, 4.0 * s.uniform(3) - 2.0
        p, q = DiagGaussian(mp, lp), DiagGaussian(mq, lq)
        r = quotient_of_experts(product_of_experts([p, q], include_prior=False), q)
        worst = max(worst, float(np.abs(r.mean.data - mp).max()), float(np.abs(r.log_var.data - lp).max()))
    return worst < 1e-10, f"max abs error {worst:.2e}"


def check_grads(seed: int = 13) -> tuple[bool, str]:
    s = RngStream(seed, stream_id=3)
    x = s.normal((3, 4))
    ops = {
        "exp": lambda t: apply_unary("exp", t).sum(),
        "tanh": lambda t: apply_unary("tanh", t).sum(),
        "softplus": lambda t: apply_unary("softplus", t).sum(),
        "sigmoid": lambda t: apply_unary("sigmoid", t).sum(),
        "lse": lambda t: log_sum_exp(t, axis=-1).sum(),
        "matmul": lambda t: (t @ np.ones((4, 2))).sum(),
    }
    worst = max(grad_check(f, x) for f in ops.values())
    spec = [ModalitySpec("a", "bernoulli", 4, (5,)), ModalitySpec("b", "categorical", 3, (5,), embed_first_layer=True)]
    model = MvaeModel.build(2, spec, seed=seed, activation="tanh")
    batch = MultimodalBatch.full([(s.uniform((3, 4)) < 0.5).astype(float), np.array([0.0, 2.0, 1.0])])
    eps = s.normal((3, 2))
    P0 = model.params["enc.a.0.weight"]

    def elbo(w):
        P = {k: v for k, v in model.tensor_params().items()}
        P["enc.a.0.weight"] = w
        return elbo_subset(model, batch, [True, True], noise=eps, params=P)

    worst = max(worst, grad_check(elbo, P0))
    return worst < 1e-4, f"max rel error {worst:.2e}"


def check_kl_monte_carlo(n_draws: int = 100_000, seed: int = 14) -> tuple[bool, str]:
    s = RngStream(seed, stream_id=4)
    worst = 0.0
    for _ in range(20):
        g = DiagGaussian(2.0 * s.normal(3), 2.0 * s.uniform(3) - 1.0)
        z = g.mean.data + np.exp(0.5 * g.log_var.data) * s.normal((n_draws, 3))
        log_q = (-0.5 * ((z - g.mean.data) ** 2 / g.var.data + g.log_var.data + math.log(2 * math.pi))).sum(1)
        log_p = (-0.5 * (z**2 + math.log(2 * math.pi))).sum(1)
        d = log_q - log_p
        se = d.std(ddof=1) / math.sqrt(n_draws)
        worst = max(worst, abs(d.mean() - kl_to_standard_normal(g).item()) / se)
    return worst < 3.0, f"max |z| {worst:.2f}"


def check_linear_gaussian(seed: int = 15) -> tuple[bool, str]:
    spec = LinearGaussianSpec((1.0, 2.0), (1.0, 0.5))
    ds = linear_gaussian_dataset(spec, 50, seed)
    oracle, batch = ds.oracle, ds.to_batch()
    X = np.column_stack(ds.arrays)
    exact = linear_gaussian_model(spec)
    model = shift_proposal(shift_proposal(exact, 0, 0.5), 1, 0.5)
    st = RngStream(seed, stream_id=5)
    n = 10_000
    errs = [
        abs(estimate_log_marginal(model, batch, 0, [0], n, st).estimate - oracle.log_marginal(0, X[:, 0]).mean()),
        abs(estimate_log_joint(model, batch, [0, 1], [0, 1], n, st).estimate - oracle.log_joint([0, 1], X).mean()),
        abs(estimate_log_conditional(model, batch, 0, 1, n, n, st).estimate
            - oracle.log_conditional(0, 1, X[:, 0], X[:, 1]).mean()),
    ]
    var0 = estimate_log_marginal(exact, batch, 0, [0], 100, st).log_weight_variance
    ok = errs[0] < 0.05 and errs[1] < 0.05 and errs[2] < 0.1 and var0 < 1e-10
    return ok, f"errors {errs[0]:.3f}/{errs[1]:.3f}/{errs[2]:.3f} nats, exact-proposal variance {var0:.1e}"


def check_parameter_counts() -> tuple[bool, str]:
    m = reference_mnist_model()
    total, image = count_inference_parameters(m), count_inference_parameters(m, "image")
    return (total, image) == (1_063_680, 730_240), f"total {total:,}, image encoder {image:,}"


def run_checks(poe: Callable = product_of_experts) -> list[tuple[str, bool, str]]:
    suite = [
        ("poe-grid", lambda: check_poe_grid(poe)),
        ("qoe-inversion", check_qoe_inversion),
        ("grad-check", check_grads),
        ("kl-monte-carlo", check_kl_monte_carlo),
        ("linear-gaussian-estimators", check_linear_gaussian),
        ("parameter-counts", check_parameter_counts),
    ]
    results = []
    for name, fn in suite:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
