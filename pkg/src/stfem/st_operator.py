"""Kronecker-structured space-time systems for batches of time steps.

A batch of ``c`` consecutive steps with ``n_t`` temporal unknowns each is
written as

    S_batch = K_A (x) A_h + K_M (x) M_h

with small dense temporal matrices ``K_A``, ``K_M`` of size
``c*n_t x c*n_t``.  The diagonal blocks hold the single-step operator; the
lower blocks carry the history couplings (jump terms for DG, continuity
constraint for CGP, and for the condensed wave systems the recursively
eliminated velocity).  Space-time vectors are arrays of shape
``(c, n_t, n_x)``.

Sign convention: ``alpha`` and ``beta`` are the raw integrals stored in
:class:`~stfem.time_basis.TemporalWeights`; every formula below follows
from substituting them into the variational forms.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .space_fem import SpatialOperator, apply_combined
from .time_basis import TemporalWeights

log = logging.getLogger(__name__)

__all__ = [
    "StepState",
    "SpaceTimeOperator",
    "wave_cgp_blocks",
    "batch_temporal_matrices",
    "build_rhs",
    "velocity_update",
]


@dataclass
class StepState:
    """Data handed from one batch to the next (values at the batch start)."""

    u_prev: np.ndarray
    v_prev: np.ndarray | None = None
    f_prev: np.ndarray | None = None

    def copy(self):
        return StepState(self.u_prev.copy(),
                         None if self.v_prev is None else self.v_prev.copy(),
                         None if self.f_prev is None else self.f_prev.copy())


@dataclass
class _Scaled:
    """Step-size scaled temporal weights plus the derived quantities."""

    mt: np.ndarray
    at: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    mt_inv: np.ndarray
    last_row: np.ndarray = field(repr=False)  # e_last^T M_t^{-1}


def _scale(weights: TemporalWeights, tau: float) -> _Scaled:
    mt = tau * weights.m_tau
    lu = sla.lu_factor(mt)
    mt_inv = sla.lu_solve(lu, np.eye(weights.n_t))
    cond = np.linalg.cond(weights.m_tau)
    if cond > 1e8:
        log.warning("temporal mass matrix badly conditioned (cond=%.3e)", cond)
    else:
        log.debug("temporal mass matrix cond=%.3e", cond)
    return _Scaled(mt, weights.a_tau.copy(), weights.alpha.copy(), tau * weights.beta,
                   mt_inv, mt_inv[-1].copy())


def wave_cgp_blocks(weights: TemporalWeights, c: int, tau: float = 1.0) -> dict:
    """History blocks of the batched condensed CGP wave system.

    With ``r = e_k^T M_t^{-1}`` the end-point velocity obeys
    ``v_s = r A_t u_s + z u_{s-1} - g v_{s-1}``, where ``g = r beta`` and
    ``z = r alpha`` (for the diagonal CGP mass these are
    ``beta_k / M_kk`` and ``alpha_k / M_kk``).  Block row ``i`` of the batch
    couples to block ``j < i`` through ``-B + E[i, j]`` for ``j = i - 1``
    and ``E[i, j]`` otherwise, ``E = -C + D``.

    Returns a dict with the temporal factors ``B_A`` (of ``A_h``), ``B_M``
    (of ``M_h``), the per-pair ``C``, ``D`` and ``E`` (all multiplying
    ``M_h``; 1-based keys ``(i, j)``), and the scalars ``g``, ``z`` and the
    vector ``alpha_A = alpha - A_t M_t^{-1} beta``.
    """
    if weights.scheme != "CGP":
        raise ValueError("wave_cgp_blocks needs CGP weights")
    w = _scale(weights, tau)
    k = weights.n_t
    e_k = np.zeros(k)
    e_k[-1] = 1.0
    g = float(w.last_row @ w.beta)
    z = float(w.last_row @ w.alpha)
    alpha_A = w.alpha - w.at @ w.mt_inv @ w.beta
    row = w.last_row @ w.at
    # b = -beta (x) A_h - A_t M_t^{-1} alpha (x) M_h acts on u_{i-1}^k; B = 1_k (x) b
    B_A = -np.outer(w.beta, e_k)
    B_M = -np.outer(w.at @ w.mt_inv @ w.alpha, e_k)
    C, D, E = {}, {}, {}
    for i in range(2, c + 1):
        for j in range(1, i):
            C[i, j] = -((-g) ** (i - j - 1)) * np.outer(alpha_A, row)
            if i > 2 and i - 1 > j:
                D[i, j] = z * (-g) ** (i - j - 2) * np.outer(alpha_A, e_k)
            else:
                D[i, j] = np.zeros((k, k))
            E[i, j] = -C[i, j] + D[i, j]
    return {"B_A": B_A, "B_M": B_M, "C": C, "D": D, "E": E, "g": g, "z": z, "alpha_A": alpha_A}


def batch_temporal_matrices(equation: str, weights: TemporalWeights, tau: float, c: int):
    """Temporal factors ``(K_A, K_M)`` of the batched system."""
    w = _scale(weights, tau)
    n = weights.n_t
    KA = np.zeros((c * n, c * n))
    KM = np.zeros((c * n, c * n))
    e_last = np.zeros(n)
    e_last[-1] = 1.0

    def blk(K, i, j):
        return K[i * n:(i + 1) * n, j * n:(j + 1) * n]

    if equation == "heat":
        for s in range(c):
            blk(KA, s, s)[:] = w.mt
            blk(KM, s, s)[:] = w.at
        for s in range(1, c):
            if weights.scheme == "DG":
                blk(KM, s, s - 1)[:] = -np.outer(w.alpha, e_last)
            else:
                blk(KA, s, s - 1)[:] = np.outer(w.beta, e_last)
                blk(KM, s, s - 1)[:] = np.outer(w.alpha, e_last)
        return KA, KM

    if equation != "wave":
        raise ValueError(f"unknown equation {equation!r}")
    S_t = w.at @ w.mt_inv @ w.at
    for s in range(c):
        blk(KA, s, s)[:] = w.mt
        blk(KM, s, s)[:] = S_t
    if weights.scheme == "DG":
        D = w.at @ w.mt_inv @ w.alpha
        B = np.outer(w.alpha, w.last_row @ w.at) + np.outer(D, e_last)
        C = -(w.last_row @ w.alpha) * np.outer(w.alpha, e_last)
        for s in range(1, c):
            blk(KM, s, s - 1)[:] = -B
        for s in range(2, c):
            blk(KM, s, s - 2)[:] = -C
        return KA, KM

    blocks = wave_cgp_blocks(weights, c, tau)
    for (i, j), E in blocks["E"].items():
        s, t = i - 1, j - 1
        blk(KM, s, t)[:] = E
        if j == i - 1:
            blk(KA, s, t)[:] -= blocks["B_A"]
            blk(KM, s, t)[:] -= blocks["B_M"]
    return KA, KM


class SpaceTimeOperator:
    """Batched space-time operator ``K_A (x) A_h + K_M (x) M_h``.

    Parameters
    ----------
    equation : {'heat', 'wave'}
    weights : TemporalWeights
    tau : float
        Uniform step size within the batch.
    n_steps : int
        Batch size ``c``.
    mass, stiffness : SpatialOperator
    constrained : ndarray of bool, optional
        Dirichlet mask over spatial DoFs (symmetric elimination, unit
        diagonal); by default the boundary DoFs of the mass operator's map.
    """

    def __init__(self, equation: str, weights: TemporalWeights, tau: float, n_steps: int,
                 mass: SpatialOperator, stiffness: SpatialOperator, constrained=None):
        if equation not in ("heat", "wave"):
            raise ValueError(f"equation must be 'heat' or 'wave', got {equation!r}")
        if tau <= 0 or n_steps < 1:
            raise ValueError("need tau > 0 and n_steps >= 1")
        if mass.n_dofs != stiffness.n_dofs:
            raise ValueError("mass and stiffness act on different spaces")
        self.equation = equation
        self.weights = weights
        self.scheme = weights.scheme
        self.tau = float(tau)
        self.n_steps = int(n_steps)
        self.n_t = weights.n_t
        self.mass = mass
        self.stiffness = stiffness
        self.n_x = mass.n_dofs
        if constrained is None:
            constrained = mass.dofmap.boundary_mask
        self.constrained = np.asarray(constrained, dtype=bool)
        self.KA, self.KM = batch_temporal_matrices(equation, weights, tau, n_steps)
        self._scaled = _scale(weights, tau)

    @property
    def shape3(self):
        return (self.n_steps, self.n_t, self.n_x)

    @property
    def size(self) -> int:
        return self.n_steps * self.n_t * self.n_x

    def _as3(self, u):
        u = np.asarray(u, dtype=float)
        if u.size != self.size:
            raise ValueError(f"vector of size {u.size} does not match operator size {self.size}")
        return u.reshape(self.shape3)

    def apply_unconstrained(self, u):
        u = self._as3(u)
        y = apply_combined(self.mass, self.stiffness, u.reshape(-1, self.n_x), self.KM, self.KA)
        return y.reshape(self.shape3)

    def apply(self, u):
        """Constrained batched operator; returns an array shaped like ``u``."""
        shape = np.shape(u)
        u = self._as3(u)
        v = np.where(self.constrained, 0.0, u)
        y = self.apply_unconstrained(v)
        y[..., self.constrained] = u[..., self.constrained]
        return y.reshape(shape)

    __call__ = apply

    def dof_times(self, t_start: float) -> np.ndarray:
        """Absolute times of the unknowns, shape (c, n_t)."""
        s = np.arange(self.n_steps)[:, None]
        return t_start + self.tau * (s + self.weights.dof_nodes[None, :])

    def dense_matrix(self):
        """Explicit constrained matrix (small problems only)."""
        A = self.stiffness.assemble_dense()
        M = self.mass.assemble_dense()
        K = np.kron(self.KA, A) + np.kron(self.KM, M)
        mask = np.tile(self.constrained, self.n_steps * self.n_t)
        K[mask, :] = 0.0
        K[:, mask] = 0.0
        K[mask, mask] = 1.0
        return K


def _nodal(op: SpaceTimeOperator, func, times):
    from .space_fem import interpolate

    dm = op.mass.dofmap
    pts = dm.support_points()
    out = np.empty(np.shape(times) + (op.n_x,))
    for idx in np.ndindex(np.shape(times)):
        t = float(np.asarray(times)[idx])
        out[idx] = np.broadcast_to(np.asarray(func(pts, t), float), (op.n_x,))
    return out


def _load(op: SpaceTimeOperator, func, times):
    """Spatial load vectors ``(f(., t), phi_i)`` for every entry of ``times``."""
    from .space_fem import assemble_load

    dm = op.mass.dofmap
    out = np.empty(np.shape(times) + (op.n_x,))
    for idx in np.ndindex(np.shape(times)):
        t = float(np.asarray(times)[idx])
        out[idx] = assemble_load(dm, lambda x: func(x, t))
    return out


def build_rhs(op: SpaceTimeOperator, f, state: StepState, t_start: float, dirichlet=None):
    """Right-hand side of a batch.

    Parameters
    ----------
    f : callable ``f(points, t)`` or None
        Source, sampled at the temporal unknown nodes and integrated in space
        by Gauss quadrature; for CGP also at the interval starts.
        ``state.f_prev`` may carry the load vector at ``t_start``.
    state : StepState
        End values of the previous batch.
    dirichlet : callable ``g(points, t)`` or None
        Boundary data; ``None`` means homogeneous.
    """
    w = op._scaled
    c, n, nx = op.shape3
    M, A = op.mass, op.stiffness
    rhs = np.zeros(op.shape3)
    times = op.dof_times(t_start)

    if f is not None:
        Mf = _load(op, f, times)
        rhs += np.einsum("ij,sjx->six", w.mt, Mf)
        if op.scheme == "CGP":
            fprev = np.empty((c, nx))
            fprev[0] = state.f_prev if state.f_prev is not None else _load(op, f, [t_start])[0]
            fprev[1:] = Mf[:-1, -1]
            rhs += w.beta[None, :, None] * fprev[:, None, :]

    u0 = state.u_prev
    Mu0 = M.apply(u0)
    if op.equation == "heat":
        if op.scheme == "DG":
            rhs[0] += np.outer(w.alpha, Mu0)
        else:
            rhs[0] -= np.outer(w.beta, A.apply(u0)) + np.outer(w.alpha, Mu0)
    else:
        if state.v_prev is None:
            raise ValueError("wave equation needs v_prev in the step state")
        Mv0 = M.apply(state.v_prev)
        if op.scheme == "DG":
            D = w.at @ w.mt_inv @ w.alpha
            rhs[0] += np.outer(w.alpha, Mv0) + np.outer(D, Mu0)
            if c > 1:
                rhs[1] -= (w.last_row @ w.alpha) * np.outer(w.alpha, Mu0)
        else:
            blocks = wave_cgp_blocks(op.weights, c, op.tau)
            g, z, aA = blocks["g"], blocks["z"], blocks["alpha_A"]
            rhs[0] -= (np.outer(w.beta, A.apply(u0)) + np.outer(w.at @ w.mt_inv @ w.alpha, Mu0)
                       + np.outer(aA, Mv0))
            for i in range(1, c):
                rhs[i] -= np.outer(aA, z * (-g) ** (i - 1) * Mu0 + (-g) ** i * Mv0)

    mask = op.constrained
    if dirichlet is not None and np.any(mask):
        uD = np.zeros(op.shape3)
        uD[..., mask] = _nodal(op, dirichlet, times)[..., mask]
        rhs -= op.apply_unconstrained(uD)
        rhs[..., mask] = uD[..., mask]
    else:
        rhs[..., mask] = 0.0
    return rhs


def velocity_update(op: SpaceTimeOperator, u, state: StepState) -> np.ndarray:
    """Recover the velocity unknowns of a solved wave batch, shape (c, n_t, n_x)."""
    if op.equation != "wave":
        raise ValueError("velocity_update needs a wave operator")
    w = op._scaled
    u = op._as3(u)
    v = np.empty_like(u)
    u_prev, v_prev = state.u_prev, state.v_prev
    for s in range(op.n_steps):
        r = w.at @ u[s]
        if op.scheme == "DG":
            r -= np.outer(w.alpha, u_prev)
        else:
            r += np.outer(w.alpha, u_prev) - np.outer(w.beta, v_prev)
        v[s] = w.mt_inv @ r
        u_prev, v_prev = u[s, -1], v[s, -1]
    return v
