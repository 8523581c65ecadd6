import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stfem.mesh import make_cartesian, perturb
from stfem.space_fem import SpatialDofMap, SpatialOperator, assemble_load, interpolate
from stfem.st_operator import (SpaceTimeOperator, StepState, batch_temporal_matrices, build_rhs,
                               velocity_update, wave_cgp_blocks)
from stfem.time_basis import temporal_weights


def sequential_oracle(eq, w, tau, M, A, u0, v0, loads, load_prev):
    """Step-by-step dense solve of the uncondensed systems on interior DoFs.

    ``loads`` has shape (c, n_t, n) and holds the spatial load vectors at the
    temporal unknown nodes, ``load_prev`` (c, n) the loads at the step starts.
    """
    m, a, al, be = tau * w.m_tau, w.a_tau, w.alpha, tau * w.beta
    n = M.shape[0]
    I = np.eye(n)
    us, vs = [], []
    for s in range(loads.shape[0]):
        Fm = np.kron(m, I) @ loads[s].ravel()
        if eq == "heat":
            L = np.kron(m, A) + np.kron(a, M)
            r = Fm
            if w.scheme == "DG":
                r = r + np.kron(al, M @ u0)
            else:
                r = r + np.kron(be, load_prev[s]) - np.kron(be, A @ u0) - np.kron(al, M @ u0)
            U = np.linalg.solve(L, r).reshape(w.n_t, -1)
            us.append(U)
            u0 = U[-1]
        else:
            L = np.block([[np.kron(a, M), -np.kron(m, M)], [np.kron(m, A), np.kron(a, M)]])
            if w.scheme == "DG":
                r1 = np.kron(al, M @ u0)
                r2 = Fm + np.kron(al, M @ v0)
            else:
                r1 = -np.kron(al, M @ u0) + np.kron(be, M @ v0)
                r2 = Fm + np.kron(be, load_prev[s]) - np.kron(be, A @ u0) - np.kron(al, M @ v0)
            X = np.linalg.solve(L, np.concatenate([r1, r2]))
            U, V = X[: r1.size].reshape(w.n_t, -1), X[r1.size:].reshape(w.n_t, -1)
            us.append(U)
            vs.append(V)
            u0, v0 = U[-1], V[-1]
    return np.array(us), (np.array(vs) if vs else None)


def _source(x, t):
    return np.sin(3 * x[:, 0] + t) * x[:, 1] * (1 - x[:, 1]) + np.cos(2 * t) * x[:, 0]


@pytest.fixture(scope="module")
def spaces():
    mesh = perturb(make_cartesian(2, refinements=2), 0.15, seed=5)
    out = {}
    for p in (1, 2, 3):
        dm = SpatialDofMap(mesh, p)
        out[p] = (dm, SpatialOperator(dm, "Mass"), SpatialOperator(dm, "Stiffness"))
    return out


@pytest.mark.parametrize("eq", ["heat", "wave"])
@pytest.mark.parametrize("scheme", ["DG", "CGP"])
@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("c", [1, 3])
def test_batched_solve_matches_sequential(spaces, eq, scheme, k, c):
    dm, Mo, Ao = spaces[k]
    w = temporal_weights(scheme, k)
    tau, t0 = 0.1, 0.3
    op = SpaceTimeOperator(eq, w, tau, c, Mo, Ao)
    rng = np.random.default_rng(k + 10 * c)
    inner = ~dm.boundary_mask
    u0 = np.where(inner, rng.standard_normal(dm.n_dofs), 0.0)
    v0 = np.where(inner, rng.standard_normal(dm.n_dofs), 0.0) if eq == "wave" else None
    state = StepState(u0, v0)
    rhs = build_rhs(op, _source, state, t0)
    u = np.linalg.solve(op.dense_matrix(), rhs.ravel()).reshape(op.shape3)

    Md = Mo.assemble_dense()[np.ix_(inner, inner)]
    Ad = Ao.assemble_dense()[np.ix_(inner, inner)]
    times = op.dof_times(t0)
    loads = np.array([[assemble_load(dm, lambda x, t=t: _source(x, t))[inner] for t in row]
                      for row in times])
    prev = np.array([assemble_load(dm, lambda x, t=t0 + tau * s: _source(x, t))[inner]
                     for s in range(c)])
    U, V = sequential_oracle(eq, w, tau, Md, Ad, u0[inner], None if v0 is None else v0[inner],
                             loads, prev)
    assert np.abs(u[..., inner] - U).max() <= 1e-10 * np.abs(U).max()
    assert np.all(u[..., ~inner] == 0.0)
    if eq == "wave":
        v = velocity_update(op, u, state)
        assert np.abs(v[..., inner] - V).max() <= 1e-10 * np.abs(V).max()


@settings(max_examples=15, deadline=None)
@given(eq=st.sampled_from(["heat", "wave"]), scheme=st.sampled_from(["DG", "CGP"]),
       k=st.integers(1, 3), c=st.integers(1, 3), seed=st.integers(0, 99))
def test_matrix_free_apply_matches_dense_kronecker(spaces, eq, scheme, k, c, seed):
    dm, Mo, Ao = spaces[k]
    op = SpaceTimeOperator(eq, temporal_weights(scheme, k), 0.05, c, Mo, Ao)
    x = np.random.default_rng(seed).standard_normal(op.size)
    K = np.kron(op.KA, Ao.assemble_dense()) + np.kron(op.KM, Mo.assemble_dense())
    y = op.apply_unconstrained(x).ravel()
    assert np.abs(y - K @ x).max() <= 1e-12 * np.abs(K @ x).max()
    np.testing.assert_allclose(op.apply(x).ravel(), op.dense_matrix() @ x, atol=1e-12, rtol=0)
    assert op.apply(x.reshape(op.shape3)).shape == op.shape3


@pytest.mark.parametrize("scheme,k", [("DG", 1), ("DG", 2), ("CGP", 1), ("CGP", 2)])
def test_heat_temporal_blocks_are_block_lower_triangular(scheme, k):
    w = temporal_weights(scheme, k)
    KA, KM = batch_temporal_matrices("heat", w, 0.1, 3)
    n = w.n_t
    for K in (KA, KM):
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.all(K[i * n:(i + 1) * n, j * n:(j + 1) * n] == 0)
    # identical diagonal blocks
    np.testing.assert_array_equal(KA[:n, :n], KA[-n:, -n:])


def test_wave_cgp_block_factors():
    b = wave_cgp_blocks(temporal_weights("CGP", 2), 3, tau=0.1)
    assert {"g", "z", "alpha_A"} <= set(b)


def test_constant_heat_solution_is_stationary(spaces):
    # u = 1 with matching boundary data and zero source stays 1
    dm, Mo, Ao = spaces[2]
    for scheme in ("DG", "CGP"):
        op = SpaceTimeOperator("heat", temporal_weights(scheme, 2), 0.1, 2, Mo, Ao)
        rhs = build_rhs(op, None, StepState(np.ones(dm.n_dofs)), 0.0, dirichlet=lambda x, t: 1.0)
        u = np.linalg.solve(op.dense_matrix(), rhs.ravel())
        np.testing.assert_allclose(u, 1.0, atol=1e-12)


def test_cgp_wave_velocity_of_linear_motion(spaces):
    # u = t * g(x) with harmonic g: velocity g, no source needed
    dm, Mo, Ao = spaces[2]
    g = lambda x: 1 + x[:, 0] + 2 * x[:, 1]
    gx = interpolate(dm, g)
    for scheme in ("DG", "CGP"):
        op = SpaceTimeOperator("wave", temporal_weights(scheme, 2), 0.1, 2, Mo, Ao)
        state = StepState(np.zeros(dm.n_dofs), gx.copy())
        rhs = build_rhs(op, None, state, 0.0, dirichlet=lambda x, t: t * g(x))
        u = np.linalg.solve(op.dense_matrix(), rhs.ravel()).reshape(op.shape3)
        times = op.dof_times(0.0)
        np.testing.assert_allclose(u, times[..., None] * gx, atol=1e-11)
        v = velocity_update(op, u, state)
        np.testing.assert_allclose(v, np.broadcast_to(gx, v.shape), atol=1e-10)


def test_input_validation(spaces):
    dm, Mo, Ao = spaces[1]
    w = temporal_weights("DG", 1)
    with pytest.raises(ValueError):
        SpaceTimeOperator("schroedinger", w, 0.1, 1, Mo, Ao)
    with pytest.raises(ValueError):
        SpaceTimeOperator("heat", w, -0.1, 1, Mo, Ao)
    op = SpaceTimeOperator("heat", w, 0.1, 1, Mo, Ao)
    with pytest.raises(ValueError):
        op.apply(np.zeros(5))
    with pytest.raises(ValueError):
        build_rhs(SpaceTimeOperator("wave", w, 0.1, 1, Mo, Ao), None, StepState(np.zeros(dm.n_dofs)), 0.0)
    with pytest.raises(ValueError):
        velocity_update(op, np.zeros(op.size), StepState(np.zeros(dm.n_dofs)))
