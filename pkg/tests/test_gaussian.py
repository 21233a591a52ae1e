import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvae.gaussian import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    DiagGaussian,
    QuotientConstraintError,
    constrain_variance_for_quotient,
    kl_to_standard_normal,
    log_pdf,
    product_of_experts,
    quotient_of_experts,
    rsample,
)
from mvae.numerics import DimensionError, GradTape, RngStream, grad_check


def _g(mean, var):
    return DiagGaussian(np.atleast_1d(np.asarray(mean, float)), np.log(np.atleast_1d(np.asarray(var, float))))


def _close(g, mean, var, tol=1e-12):
    np.testing.assert_allclose(g.mean.data, mean, atol=tol, rtol=0)
    np.testing.assert_allclose(g.var.data, var, atol=tol, rtol=tol)


def test_log_var_is_clamped():
    g = DiagGaussian([0.0, 0.0, 0.0], [-50.0, 0.0, 50.0])
    np.testing.assert_array_equal(g.log_var.data, [LOG_VAR_MIN, 0.0, LOG_VAR_MAX])
    assert np.all(g.precision.data > 0) and np.all(np.isfinite(g.precision.data))


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        DiagGaussian([0.0, 1.0], [0.0])


def test_poe_examples():
    _close(product_of_experts([_g(0, 1), _g(0, 1)], include_prior=False), 0.0, 0.5)
    _close(product_of_experts([_g(2, 1)], include_prior=True), 1.0, 0.5)


def test_poe_empty_list():
    g = product_of_experts([], include_prior=True, dim=3)
    np.testing.assert_array_equal(g.mean.data, 0.0)
    np.testing.assert_array_equal(g.log_var.data, 0.0)
    with pytest.raises(ValueError):
        product_of_experts([], include_prior=False, dim=3)


def test_poe_dimension_mismatch():
    with pytest.raises(DimensionError):
        product_of_experts([_g([0, 0], [1, 1]), _g(0, 1)])


def test_poe_grid_quadrature_three_experts():
    s = RngStream(21)
    grid = np.linspace(-15, 15, 20001)
    dx = grid[1] - grid[0]
    for _ in range(5):
        means, variances = 4 * s.uniform(3) - 2, np.exp(2 * s.uniform(3) - 1)
        out = product_of_experts([_g(m, v) for m, v in zip(means, variances)], include_prior=False)
        log_d = sum(-0.5 * (grid - m) ** 2 / v for m, v in zip(means, variances))
        d = np.exp(log_d - log_d.max())
        d /= d.sum() * dx
        ref = np.exp(log_pdf(out, grid[:, None]).data)
        assert np.abs(d - ref).sum() * dx < 1e-3


def _random_experts(s, n, D=3):
    return [DiagGaussian(2 * s.normal(D), 3 * s.uniform(D) - 1.5) for _ in range(n)]


def test_poe_order_invariance():
    s = RngStream(22)
    experts = _random_experts(s, 5)
    ref = product_of_experts(experts)
    for perm in ([4, 3, 2, 1, 0], [2, 0, 4, 1, 3]):
        g = product_of_experts([experts[i] for i in perm])
        np.testing.assert_allclose(g.mean.data, ref.mean.data, atol=1e-10)
        np.testing.assert_allclose(g.log_var.data, ref.log_var.data, atol=1e-10)
    nested = product_of_experts([product_of_experts(experts[:2], include_prior=False),
                                 product_of_experts(experts[2:], include_prior=False)])
    np.testing.assert_allclose(nested.mean.data, ref.mean.data, atol=1e-10)
    np.testing.assert_allclose(nested.log_var.data, ref.log_var.data, atol=1e-10)


def test_prior_expert_equivalence_is_exact():
    s = RngStream(23)
    for n in range(1, 5):
        experts = _random_experts(s, n)
        a = product_of_experts(experts, include_prior=True)
        b = product_of_experts(experts + [DiagGaussian.standard(3)], include_prior=False)
        np.testing.assert_array_equal(a.mean.data, b.mean.data)
        np.testing.assert_array_equal(a.log_var.data, b.log_var.data)


def test_adding_expert_never_increases_variance():
    s = RngStream(24)
    experts = _random_experts(s, 6)
    prev = product_of_experts(experts[:1]).var.data
    for k in range(2, 7):
        cur = product_of_experts(experts[:k]).var.data
        assert np.all(cur <= prev)
        prev = cur


def test_qoe_examples():
    _close(quotient_of_experts(_g(1, 0.5), _g(0, 1)), 2.0, 1.0)
    s = RngStream(25)
    p, q = _random_experts(s, 2)
    r = quotient_of_experts(product_of_experts([p, q], include_prior=False), q)
    np.testing.assert_allclose(r.mean.data, p.mean.data, atol=1e-12)
    np.testing.assert_allclose(r.var.data, p.var.data, rtol=1e-12)


def test_qoe_violation_lists_dimensions():
    with pytest.raises(QuotientConstraintError) as info:
        quotient_of_experts(_g([0, 0, 0], [2, 0.5, 1]), _g([0, 0, 0], [1, 1, 1]))
    assert info.value.dims == [(0,), (2,)]


def test_constraint_examples():
    v = np.exp(constrain_variance_for_quotient(np.array([0.0, 1e6, -3.0]), 2).data)
    assert v[0] == 1.0
    assert v[1] < 2.0 and v[1] > 2.0 - 1e-9
    assert 0 < v[2] < 1
    with pytest.raises(ValueError):
        constrain_variance_for_quotient(np.zeros(2), 1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_constraint_total_precision_three_experts(raw):
    T = DiagGaussian(np.zeros(3), constrain_variance_for_quotient(np.array(raw), 3)).precision.data
    assert T.sum() > 2.0


def test_rsample_examples():
    g = _g([1.0, -2.0], [1.0, 3.0])
    np.testing.assert_array_equal(rsample(g, noise=np.zeros(2)).z.data, [1.0, -2.0])
    assert rsample(_g(0.0, 4.0), noise=np.ones(1)).z.item() == 2.0
    g = _g(np.full(100_000, 1.0), np.full(100_000, 0.25))
    z = rsample(g, RngStream(26)).z.data
    assert abs(z.mean() - 1.0) < 0.01 and abs(z.var() - 0.25) < 0.01


def test_rsample_identity_and_errors():
    g = DiagGaussian([0.3, -1.0], [0.2, -0.7])
    sample = rsample(g, RngStream(27))
    np.testing.assert_array_equal(sample.z.data, g.mean.data + np.exp(0.5 * g.log_var.data) * sample.noise)
    assert sample.source is g
    with pytest.raises(DimensionError):
        rsample(g, noise=np.zeros(3))
    with pytest.raises(ValueError):
        rsample(g)


def test_rsample_gradient_flows_to_mean_and_log_var():
    eps = np.array([0.4, -1.2])
    with GradTape() as tape:
        mu, lv = tape.watch([0.1, 0.2]), tape.watch([0.3, -0.5])
        z = rsample(DiagGaussian(mu, lv), noise=eps).z.sum()
    grads = tape.gradient(z, [mu, lv])
    np.testing.assert_allclose(grads[0].data, 1.0)
    np.testing.assert_allclose(grads[1].data, 0.5 * np.exp(0.5 * np.array([0.3, -0.5])) * eps)


def test_kl_examples():
    assert kl_to_standard_normal(DiagGaussian.standard(4)).item() == 0.0
    assert kl_to_standard_normal(_g(1.0, 1.0)).item() == 0.5


def test_kl_monte_carlo():
    s = RngStream(28)
    n = 100_000
    for _ in range(20):
        g = DiagGaussian(s.normal(2), 2 * s.uniform(2) - 1)
        z = rsample(DiagGaussian(np.broadcast_to(g.mean.data, (n, 2)), np.broadcast_to(g.log_var.data, (n, 2))),
                    s).z
        d = log_pdf(g, z).data - log_pdf(DiagGaussian.standard(2), z).data
        se = d.std(ddof=1) / math.sqrt(n)
        assert abs(d.mean() - kl_to_standard_normal(g).item()) < 3 * se


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_kl_non_negative(mean, log_var):
    assert kl_to_standard_normal(DiagGaussian(mean, log_var)).item() >= 0.0


def test_log_pdf_examples():
    assert abs(log_pdf(DiagGaussian.standard(1), [0.0]).item() + 0.918938533204672) < 1e-12
    g = _g([1.0, 2.0], [0.5, 3.0])
    expect = -0.5 * sum(math.log(2 * math.pi) + math.log(v) for v in (0.5, 3.0))
    assert abs(log_pdf(g, [1.0, 2.0]).item() - expect) < 1e-12
    with pytest.raises(DimensionError):
        log_pdf(g, [0.0])


def test_log_pdf_integrates_to_one_on_grid():
    g = _g(0.7, 1.8)
    grid = np.linspace(-15, 15, 200_001)
    dens = np.exp(log_pdf(g, grid[:, None]).data)
    dx = grid[1] - grid[0]
    total = (dens.sum() - 0.5 * (dens[0] + dens[-1])) * dx
    assert abs(total - 1.0) < 1e-10
    direct = np.exp(-0.5 * (grid - 0.7) ** 2 / 1.8) / math.sqrt(2 * math.pi * 1.8)
    np.testing.assert_allclose(dens, direct, atol=1e-12)


def test_fused_kl_gradient_passes_grad_check():
    s = RngStream(29)
    other = DiagGaussian(s.normal(3), s.normal(3))

    def f(mu):
        return kl_to_standard_normal(product_of_experts([DiagGaussian(mu, [0.2, -0.1, 0.4]), other]))

    assert grad_check(f, s.normal(3)) < 1e-4
