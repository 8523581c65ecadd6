import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stfem.st_operator import batch_temporal_matrices
from stfem.time_basis import (LagrangeBasis, cgp_weights, dg_weights, gauss, gauss_lobatto,
                              gauss_radau_right, lagrange_deriv, lagrange_eval, temporal_weights)


def _exactness_degree(kind, n):
    return {"gauss": 2 * n - 1, "radau": 2 * n - 2, "lobatto": 2 * n - 3}[kind]


RULES = {"gauss": gauss, "radau": gauss_radau_right, "lobatto": gauss_lobatto}


@settings(max_examples=60, deadline=None)
@given(kind=st.sampled_from(sorted(RULES)), n=st.integers(2, 13), data=st.data())
def test_quadrature_exact_up_to_degree(kind, n, data):
    rule = RULES[kind](n)
    deg = data.draw(st.integers(0, _exactness_degree(kind, n)))
    assert rule.integrate(rule.points ** deg) == pytest.approx(1.0 / (deg + 1), abs=1e-14)


@pytest.mark.parametrize("n", range(2, 10))
def test_quadrature_endpoints_and_weights(n):
    r = gauss_radau_right(n)
    lo = gauss_lobatto(n)
    assert r.points[-1] == 1.0 and np.all(np.diff(r.points) > 0) and r.points[0] > 0
    assert lo.points[0] == 0.0 and lo.points[-1] == 1.0
    for rule in (r, lo, gauss(n)):
        assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
        assert np.all(rule.weights > 0)


def test_known_nodes():
    assert gauss_radau_right(2).points == pytest.approx([1 / 3, 1.0], abs=1e-15)
    assert gauss_lobatto(3).points == pytest.approx([0.0, 0.5, 1.0], abs=1e-15)
    assert gauss_lobatto(3).weights == pytest.approx([1 / 6, 2 / 3, 1 / 6], abs=1e-15)


def test_invalid_sizes():
    with pytest.raises(ValueError):
        gauss(0)
    with pytest.raises(ValueError):
        gauss_lobatto(1)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 8), t=st.floats(0, 1))
def test_lagrange_partition_of_unity(n, t):
    basis = LagrangeBasis(gauss_radau_right(n).points)
    assert basis.values(np.array([t])).sum() == pytest.approx(1.0, abs=1e-12)
    assert basis.derivatives(np.array([t])).sum() == pytest.approx(0.0, abs=1e-9)


def test_lagrange_kronecker_property_and_index_check():
    basis = LagrangeBasis(gauss_lobatto(4).points)
    assert basis.values(basis.nodes) == pytest.approx(np.eye(4), abs=1e-15)
    assert lagrange_eval(basis, 0, 0.0) == 1.0
    # derivative of the linear basis on [0, 1]
    lin = LagrangeBasis([0.0, 1.0])
    assert lagrange_deriv(lin, 1, 0.3) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        basis.eval(4, 0.5)


def test_dg0_and_cgp1_weights():
    w = dg_weights(0)
    np.testing.assert_allclose(w.m_tau, [[1.0]], atol=1e-15)
    np.testing.assert_allclose(w.a_tau, [[1.0]], atol=1e-15)
    np.testing.assert_allclose(w.alpha, [1.0], atol=1e-15)
    w = cgp_weights(1)
    np.testing.assert_allclose(w.m_tau, [[0.5]], atol=1e-15)
    np.testing.assert_allclose(w.a_tau, [[1.0]], atol=1e-15)
    np.testing.assert_allclose(w.alpha, [-1.0], atol=1e-15)
    np.testing.assert_allclose(w.beta, [0.5], atol=1e-15)


@pytest.mark.parametrize("k", range(0, 6))
def test_dg_weight_identities(k):
    w = dg_weights(k)
    # consistency: constants are reproduced, A_t 1 = alpha (jump of a constant is zero)
    assert w.a_tau @ np.ones(k + 1) == pytest.approx(w.alpha, abs=1e-12)
    # the Radau collocation makes the mass diagonal
    assert w.m_tau == pytest.approx(np.diag(np.diag(w.m_tau)), abs=1e-13)


@pytest.mark.parametrize("k", range(1, 6))
def test_cgp_weight_identities(k):
    w = cgp_weights(k)
    assert w.a_tau @ np.ones(k) + w.alpha == pytest.approx(np.zeros(k), abs=1e-12)
    assert w.m_tau.sum() + w.beta.sum() == pytest.approx(1.0, abs=1e-13)


def test_temporal_weights_dispatch_and_errors():
    assert temporal_weights("DG", 2).n_t == 3
    assert temporal_weights("CGP", 2).n_t == 2
    with pytest.raises(ValueError):
        temporal_weights("CGP", 0)
    with pytest.raises(ValueError):
        temporal_weights("XYZ", 1)


def scalar_trajectory(scheme, k, lam, tau, n_steps, u0=1.0):
    """End values of u' = -lam u, all steps solved as one batch."""
    w = temporal_weights(scheme, k)
    KA, KM = batch_temporal_matrices("heat", w, tau, n_steps)
    n = w.n_t
    rhs = np.zeros(n * n_steps)
    if scheme == "DG":
        rhs[:n] = w.alpha * u0
    else:
        rhs[:n] = -(tau * w.beta * lam + w.alpha) * u0
    U = np.linalg.solve(KA * lam + KM, rhs).reshape(n_steps, n)
    return U[:, -1]


def test_dg0_is_backward_euler():
    tau = 0.1
    u = scalar_trajectory("DG", 0, 1.0, tau, 10)
    ref = (1.0 / (1.0 + tau)) ** np.arange(1, 11)
    assert np.max(np.abs(u - ref)) <= 1e-13


def test_cgp1_is_crank_nicolson():
    tau = 0.1
    u = scalar_trajectory("CGP", 1, 1.0, tau, 10)
    ref = ((1 - tau / 2) / (1 + tau / 2)) ** np.arange(1, 11)
    assert np.max(np.abs(u - ref)) <= 1e-13


@pytest.mark.parametrize("z", [-0.5, -2.0, -10.0])
def test_dg1_amplification_is_radau_iia(z):
    r = scalar_trajectory("DG", 1, -z, 1.0, 1)[0]
    assert r == pytest.approx((1 + z / 3) / (1 - 2 * z / 3 + z * z / 6), abs=1e-12)
