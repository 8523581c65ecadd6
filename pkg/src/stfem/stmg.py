"""Geometric space-time multigrid preconditioner.

The hierarchy coarsens one attribute at a time: the spatial mesh (``h``),
the spatial degree (``p``), the number of time steps in the batch
(``tau``) or the temporal order (``k``).  Coarse operators are
rediscretized on every level.  Smoothing uses an additive Schwarz method
whose blocks are the rows and columns of the level operator belonging to
one space-time cell (one spatial cell times one time interval).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .krylov import gmres
from .mesh import CoefficientField, MeshLevel
from .space_fem import SpatialDofMap, SpatialOperator
from .st_operator import SpaceTimeOperator
from .time_basis import LagrangeBasis, temporal_weights
from .timing import SectionTimer

log = logging.getLogger(__name__)

__all__ = [
    "LevelDescriptor",
    "plan_levels",
    "spatial_prolongation",
    "temporal_prolongation",
    "ASMSmoother",
    "LevelSystem",
    "build_hierarchy",
    "smooth",
    "estimate_relaxation",
    "v_cycle",
    "STMGPreconditioner",
    "COARSE_DIRECT_LIMIT",
]

COARSE_DIRECT_LIMIT = 20000
OMEGA_MAX = 1.2
MIN_RATIO = 0.5

_ALIASES = {"h": "h", "space-h": "h", "p": "p", "space-p": "p",
            "tau": "tau", "τ": "tau", "time-tau": "tau", "time-τ": "tau",
            "k": "k", "time-k": "k"}


def _k_min(scheme):
    return 0 if scheme == "DG" else 1


@dataclass
class LevelDescriptor:
    """Discretization parameters of one level.

    ``coarsening`` names the step that produced this level from the next
    finer one (``None`` on the finest level).
    """

    mesh: MeshLevel
    p: int
    k: int
    n_steps: int
    tau: float
    coarsening: str | None = None

    def describe(self):
        return {"type": self.coarsening or "finest", "mesh_level": self.mesh.level,
                "n_cells": self.mesh.n_cells, "p": self.p, "k": self.k,
                "n_steps": self.n_steps, "tau": self.tau}


def _normalize_strategy(strategy):
    out = []
    for s in strategy:
        key = _ALIASES.get(str(s).strip().lower())
        if key is None:
            raise ValueError(f"unknown coarsening step {s!r}; use h, p, tau or k")
        out.append(key)
    return out


def default_strategy(mesh: MeshLevel, scheme: str, k: int, n_steps: int):
    """All spatial h levels first, then halve the steps, then lower k."""
    steps = ["h"] * mesh.level
    c = n_steps
    while c > 1 and c % 2 == 0:
        steps.append("tau")
        c //= 2
    steps += ["k"] * (k - _k_min(scheme))
    return steps


def plan_levels(mesh: MeshLevel, p: int, k: int, n_steps: int, tau: float, scheme: str,
                strategy=None) -> list:
    """Level descriptors ordered from coarsest to finest.

    Raises
    ------
    ValueError
        If a step is impossible (no coarser mesh, odd step count, order or
        degree below its minimum).
    """
    if strategy is None or strategy == "auto":
        strategy = default_strategy(mesh, scheme, k, n_steps)
    steps = _normalize_strategy(strategy)
    hier = mesh.hierarchy()
    cur = LevelDescriptor(mesh, p, k, n_steps, tau)
    levels = [cur]
    for i, s in enumerate(steps):
        if s == "h":
            if cur.mesh.level == 0:
                raise ValueError(f"step {i}: no coarser mesh below level 0")
            nxt = LevelDescriptor(hier[cur.mesh.level - 1], cur.p, cur.k, cur.n_steps, cur.tau, s)
        elif s == "p":
            if cur.p <= 1:
                raise ValueError(f"step {i}: spatial degree already 1")
            nxt = LevelDescriptor(cur.mesh, max(1, cur.p // 2), cur.k, cur.n_steps, cur.tau, s)
        elif s == "tau":
            if cur.n_steps % 2 or cur.n_steps < 2:
                raise ValueError(f"step {i}: cannot halve {cur.n_steps} time steps")
            nxt = LevelDescriptor(cur.mesh, cur.p, cur.k, cur.n_steps // 2, 2 * cur.tau, s)
        else:
            if cur.k - 1 < _k_min(scheme):
                raise ValueError(f"step {i}: temporal order {cur.k} is minimal for {scheme}")
            nxt = LevelDescriptor(cur.mesh, cur.p, cur.k - 1, cur.n_steps, cur.tau, s)
        levels.append(nxt)
        cur = nxt
    return levels[::-1]


# ---------------------------------------------------------------- transfers

def spatial_prolongation(coarse: SpatialDofMap, fine: SpatialDofMap) -> sp.csr_matrix:
    """Interpolation of the coarse Q_p space into the fine one.

    The fine mesh must be the coarse one refined once (with the same
    degree) or the same mesh (degree change).  The embedding is computed
    on the reference cell, so it is exact for nested spaces.
    """
    d = fine.dim
    if fine.mesh.level == coarse.mesh.level:
        parent = np.arange(fine.n_cells)
        offset = np.zeros((fine.n_cells, d), dtype=int)
        scale = 1.0
    else:
        if fine.mesh.child_to_parent is None or fine.mesh.level != coarse.mesh.level + 1:
            raise ValueError("fine mesh is not a one-level refinement of the coarse mesh")
        parent = fine.mesh.child_to_parent
        offset = fine.mesh.child_offset
        scale = 0.5
    # 1D embedding matrices per child offset: (n1_fine, n1_coarse)
    emb = [coarse.basis_1d.values(scale * (o + fine.nodes_1d)).T for o in (0, 1)]
    owner_idx = np.unique(fine.cell_to_global.ravel(), return_index=True)[1]
    own = np.zeros(fine.cell_to_global.size, dtype=bool)
    own[owner_idx] = True
    own = own.reshape(fine.cell_to_global.shape)

    rows, cols, vals = [], [], []
    for key in np.unique(offset, axis=0):
        cells = np.flatnonzero(np.all(offset == key, axis=1))
        loc = np.ones((1, 1))
        for a in range(d):  # x fastest -> x is the innermost Kronecker factor
            loc = np.kron(emb[int(key[a])], loc)
        loc[np.abs(loc) < 1e-14] = 0.0
        fr = fine.cell_to_global[cells]
        cr = coarse.cell_to_global[parent[cells]]
        mask = own[cells]
        r = np.broadcast_to(fr[:, :, None], (len(cells),) + loc.shape)
        c = np.broadcast_to(cr[:, None, :], (len(cells),) + loc.shape)
        v = np.broadcast_to(loc, (len(cells),) + loc.shape)
        sel = mask[:, :, None] & (v != 0)
        rows.append(r[sel])
        cols.append(c[sel])
        vals.append(v[sel])
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(fine.n_dofs, coarse.n_dofs))
    return P


def temporal_prolongation(scheme: str, k_coarse: int, k_fine: int, c_coarse: int,
                          c_fine: int) -> np.ndarray:
    """Dense prolongation of the temporal unknowns of a batch.

    Either ``c_fine == 2 * c_coarse`` (step halving, equal order) or
    ``c_fine == c_coarse`` (order change).  Coarse polynomials are evaluated
    at the fine unknown nodes.  For CGP the coarse polynomial on a step also
    depends on the end value of the previous coarse step; the first step's
    start value is data, so its correction is zero.
    """
    wc = temporal_weights(scheme, k_coarse)
    wf = temporal_weights(scheme, k_fine)
    if c_fine == 2 * c_coarse and k_coarse == k_fine:
        ratio = 2
    elif c_fine == c_coarse:
        ratio = 1
    else:
        raise ValueError("temporal levels must differ by step halving or by order")
    basis = LagrangeBasis(wc.trial_nodes)
    ntc, ntf = wc.n_t, wf.n_t
    P = np.zeros((c_fine * ntf, c_coarse * ntc))
    for sf in range(c_fine):
        sc, h = divmod(sf, ratio)
        t = (h + wf.dof_nodes) / ratio
        vals = basis.values(t).T  # (ntf, k_coarse + 1)
        rows = slice(sf * ntf, (sf + 1) * ntf)
        if scheme == "DG":
            P[rows, sc * ntc:(sc + 1) * ntc] = vals
        else:
            P[rows, sc * ntc:(sc + 1) * ntc] = vals[:, 1:]
            if sc > 0:
                P[rows, sc * ntc - 1] += vals[:, 0]
    P[np.abs(P) < 1e-15] = 0.0
    return P


# ----------------------------------------------------------------- smoother

def _lookup_entries(A: sp.csr_matrix, rows, cols):
    """Entries ``A[rows, cols]`` elementwise (zeros where not stored)."""
    A = A.tocsr()
    A.sum_duplicates()
    A.sort_indices()
    n = A.shape[1]
    r = np.repeat(np.arange(A.shape[0]), np.diff(A.indptr))
    keys = r.astype(np.int64) * n + A.indices
    q = np.asarray(rows, np.int64) * n + np.asarray(cols, np.int64)
    pos = np.searchsorted(keys, q.ravel())
    pos = np.minimum(pos, keys.size - 1)
    hit = keys[pos] == q.ravel()
    out = np.where(hit, A.data[pos], 0.0)
    return out.reshape(np.shape(q))


class ASMSmoother:
    """Additive Schwarz preconditioner over space-time cells.

    A space-time cell is one spatial cell times one time step of the
    batch; its block is ``K_A[s,s] (x) A_T + K_M[s,s] (x) M_T`` with the
    cell submatrices of the assembled spatial matrices.  All steps share the
    same diagonal temporal block, so one inverse per spatial cell suffices.
    Constrained DoFs get identity rows and columns and pass the residual
    through unchanged.
    """

    def __init__(self, op: SpaceTimeOperator, mass_sparse: sp.spmatrix, stiff_sparse: sp.spmatrix):
        self.op = op
        dm = op.mass.dofmap
        self.dofmap = dm
        self.n_t = op.n_t
        self.n_local = dm.n_local
        c2g = dm.cell_to_global
        rr = np.repeat(c2g[:, :, None], dm.n_local, axis=2)
        cc = np.repeat(c2g[:, None, :], dm.n_local, axis=1)
        Mc = _lookup_entries(mass_sparse, rr, cc)
        Ac = _lookup_entries(stiff_sparse, rr, cc)
        n = self.n_t
        KA = op.KA[:n, :n]
        KM = op.KM[:n, :n]
        blocks = (np.einsum("ij,cab->ciajb", KA, Ac) + np.einsum("ij,cab->ciajb", KM, Mc))
        cmask = op.constrained[c2g]  # (nc, nloc)
        bmask = np.broadcast_to(cmask[:, None, :], (dm.n_cells, n, dm.n_local))
        blocks[bmask] = 0.0
        blocks = np.moveaxis(blocks, (3, 4), (1, 2))
        blocks[bmask] = 0.0
        blocks = np.moveaxis(blocks, (1, 2), (3, 4))
        nb = n * dm.n_local
        blocks = blocks.reshape(dm.n_cells, nb, nb)
        diag = bmask.reshape(dm.n_cells, nb)
        ci, li = np.nonzero(diag)
        blocks[ci, li, li] = 1.0
        self.block_size = nb
        self.blocks = blocks
        self.inverses = np.linalg.inv(blocks)
        if not np.all(np.isfinite(self.inverses)):
            raise np.linalg.LinAlgError("singular smoother block")
        self._cmask = op.constrained

    def apply(self, r):
        """``sum_T R_T^T B_T^{-1} R_T r``; constrained entries copy ``r``."""
        op = self.op
        r = np.asarray(r, dtype=float).reshape(op.shape3)
        c, n, nx = op.shape3
        dm = self.dofmap
        loc = r[:, :, dm.cell_to_global]  # (c, n, nc, nloc)
        loc = np.transpose(loc, (2, 1, 3, 0)).reshape(dm.n_cells, self.block_size, c)
        sol = self.inverses @ loc
        sol = sol.reshape(dm.n_cells, n, dm.n_local, c)
        sol = np.transpose(sol, (3, 1, 0, 2)).reshape(c * n, -1)
        out = (dm.scatter @ sol.T).T.reshape(op.shape3)
        out[..., self._cmask] = r[..., self._cmask]
        return out

    __call__ = apply


# -------------------------------------------------------------- level system

@dataclass
class LevelSystem:
    descriptor: LevelDescriptor
    operator: SpaceTimeOperator
    smoother: ASMSmoother | None
    omega: float = 1.0
    coarse: bool = False
    prolong_space: sp.csr_matrix | None = None
    prolong_time: np.ndarray | None = None
    mass_sparse: sp.spmatrix | None = field(default=None, repr=False)
    stiff_sparse: sp.spmatrix | None = field(default=None, repr=False)
    counters: dict = field(default_factory=lambda: {"smooth": 0, "apply": 0, "coarse_solve": 0})
    _coarse_solver: object = field(default=None, repr=False)

    @property
    def size(self):
        return self.operator.size

    def apply(self, u):
        self.counters["apply"] += 1
        return self.operator.apply(u)

    def prolongate(self, e):
        """Coarse correction (shape of the coarser level) to this level."""
        op = self.operator
        if self.prolong_space is not None:
            ec = e.reshape(-1, e.shape[-1])
            out = (self.prolong_space @ ec.T).T.reshape(op.shape3)
        else:
            out = (self.prolong_time @ e.reshape(-1, op.n_x)).reshape(op.shape3)
        out[..., op.constrained] = 0.0
        return out

    def restrict(self, r, coarse_op: SpaceTimeOperator):
        """Transpose of :meth:`prolongate` without the masking."""
        op = self.operator
        r = r.reshape(op.shape3)
        if self.prolong_space is not None:
            rf = r.reshape(-1, op.n_x)
            out = (self.prolong_space.T @ rf.T).T.reshape(coarse_op.shape3)
        else:
            out = (self.prolong_time.T @ r.reshape(-1, op.n_x)).reshape(coarse_op.shape3)
        out[..., coarse_op.constrained] = 0.0
        return out

    def sparse_matrix(self) -> sp.csr_matrix:
        op = self.operator
        S = sp.kron(op.KA, self.stiff_sparse) + sp.kron(op.KM, self.mass_sparse)
        S = S.tocsr()
        mask = np.tile(op.constrained, op.n_steps * op.n_t)
        keep = sp.diags((~mask).astype(float))
        S = keep @ S @ keep + sp.diags(mask.astype(float))
        return S.tocsc()

    def coarse_solve(self, f):
        self.counters["coarse_solve"] += 1
        op = self.operator
        if self._coarse_solver is None:
            if op.size <= COARSE_DIRECT_LIMIT:
                self._coarse_solver = spla.splu(self.sparse_matrix())
            else:
                self._coarse_solver = "gmres"
        if self._coarse_solver == "gmres":
            x, _ = gmres(op.apply, f, abs_tol=0.0, rel_tol=1e-3, max_iter=200)
            return x.reshape(op.shape3)
        return self._coarse_solver.solve(np.asarray(f, float).ravel()).reshape(op.shape3)

    def describe(self):
        out = self.descriptor.describe()
        out.update({"size": int(self.size), "omega": float(self.omega), "coarse": self.coarse,
                    "block_size": None if self.smoother is None else int(self.smoother.block_size)})
        return out


def smooth(level: LevelSystem, f, u=None, timer: SectionTimer | None = None):
    """One damped additive Schwarz sweep; ``u=None`` stands for zero."""
    shape3 = level.operator.shape3
    f = np.asarray(f, float).reshape(shape3)
    if u is None:
        r = f
        u = np.zeros(shape3)
    else:
        u = np.asarray(u, float).reshape(shape3)
        r = f - level.apply(u)
    level.counters["smooth"] += 1
    if timer is None:
        corr = level.smoother.apply(r)
    else:
        with timer.section("smoother"):
            corr = level.smoother.apply(r)
    return u + level.omega * corr


def _ritz_values(matvec, v0, n_iter):
    """Eigenvalue estimates of a linear map from an Arnoldi process."""
    n = v0.size
    m = min(n_iter, n)
    V = np.zeros((m + 1, n))
    H = np.zeros((m + 1, m))
    nrm = np.linalg.norm(v0)
    if nrm == 0 or not np.isfinite(nrm):
        return None
    V[0] = v0 / nrm
    j_used = 0
    for j in range(m):
        w = matvec(V[j])
        for _ in range(2):
            h = V[:j + 1] @ w
            w -= h @ V[:j + 1]
            H[:j + 1, j] += h
        H[j + 1, j] = np.linalg.norm(w)
        j_used = j + 1
        if not np.all(np.isfinite(H[:j + 2, j])):
            return None
        if H[j + 1, j] <= 1e-12 * max(1.0, np.abs(H[:j + 1, j]).max()):
            break
        V[j + 1] = w / H[j + 1, j]
    if j_used == 0:
        return None
    return np.linalg.eigvals(H[:j_used, :j_used])


def estimate_relaxation(level: LevelSystem, n_iter: int = 20, seed: int = 0,
                        min_ratio: float = MIN_RATIO) -> float:
    """``2 / (lambda_max + lambda_min)`` for the smoothed operator ``P^{-1} S``.

    Extremal real parts of Arnoldi Ritz values stand in for the eigenvalues.
    ``lambda_min`` is raised to at least ``min_ratio * lambda_max`` so the
    top of the spectrum stays damped, and the result is capped at
    ``OMEGA_MAX``.  Falls back to 1 on breakdown or without free DoFs.
    """
    op = level.operator
    free = ~np.broadcast_to(op.constrained, op.shape3).ravel()
    if not free.any():
        log.debug("no free DoFs on this level, using omega = 1")
        return 1.0
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(op.size) * free

    def mv(v):
        return (level.smoother.apply(op.apply(v)).ravel()) * free

    ritz = _ritz_values(mv, v0, n_iter)
    if ritz is None or ritz.size == 0:
        log.warning("relaxation estimate broke down, using omega = 1")
        return 1.0
    lmax = float(np.max(ritz.real))
    lmin = max(float(np.min(ritz.real)), min_ratio * lmax, 0.0)
    if not np.isfinite(lmax) or lmax <= 0:
        log.warning("relaxation estimate not positive, using omega = 1")
        return 1.0
    omega = 2.0 / (lmax + lmin)
    log.debug("relaxation: lambda in [%.4g, %.4g], omega=%.4g", lmin, lmax, omega)
    return float(min(omega, OMEGA_MAX))


def v_cycle(levels, l, f, u=None, n_smooth=1, timer: SectionTimer | None = None):
    """One V-cycle on level ``l`` (0 is the coarsest).

    Coarse corrections start from zero.  With ``u=None`` the first
    pre-smoothing step needs no operator application.
    """
    lvl = levels[l]
    f = np.asarray(f, float).reshape(lvl.operator.shape3)
    if l == 0 or lvl.coarse:
        return lvl.coarse_solve(f)
    for _ in range(n_smooth):
        u = smooth(lvl, f, u, timer)
    r = f - lvl.apply(u)
    coarse = levels[l - 1]
    rc = lvl.restrict(r, coarse.operator)
    ec = v_cycle(levels, l - 1, rc, None, n_smooth, timer)
    u = u + lvl.prolongate(ec)
    for _ in range(n_smooth):
        u = smooth(lvl, f, u, timer)
    return u


# ------------------------------------------------------------------- builder

def build_hierarchy(equation: str, scheme: str, descriptors: list, coefficient: CoefficientField | None,
                    omega=None, relaxation_iterations: int = 20, seed: int = 0) -> list:
    """Level systems for descriptors ordered coarsest to finest.

    ``omega`` may be ``None`` (estimate per level), a float, or a sequence
    with one value per level.
    """
    spatial = {}

    def spatial_ops(mesh, p):
        key = (id(mesh), p)
        if key not in spatial:
            dm = SpatialDofMap(mesh, p)
            M = SpatialOperator(dm, "Mass")
            A = SpatialOperator(dm, "Stiffness", coefficient)
            spatial[key] = (dm, M, A, M.assemble_sparse(), A.assemble_sparse())
        return spatial[key]

    levels = []
    for i, desc in enumerate(descriptors):
        dm, M, A, Ms, As = spatial_ops(desc.mesh, desc.p)
        op = SpaceTimeOperator(equation, temporal_weights(scheme, desc.k), desc.tau, desc.n_steps, M, A)
        is_coarse = i == 0
        lvl = LevelSystem(desc, op, None, coarse=is_coarse, mass_sparse=Ms, stiff_sparse=As)
        if not is_coarse:
            prev = descriptors[i - 1]
            kind = desc_kind(prev, desc)
            if kind in ("h", "p"):
                lvl.prolong_space = spatial_prolongation(spatial_ops(prev.mesh, prev.p)[0], dm)
            else:
                lvl.prolong_time = temporal_prolongation(scheme, prev.k, desc.k, prev.n_steps, desc.n_steps)
            lvl.smoother = ASMSmoother(op, Ms, As)
            if omega is None:
                lvl.omega = estimate_relaxation(lvl, relaxation_iterations, seed)
            elif np.ndim(omega) == 0:
                lvl.omega = float(omega)
            else:
                lvl.omega = float(omega[i])
            if not (0 < lvl.omega <= OMEGA_MAX and np.isfinite(lvl.omega)):
                raise ValueError(f"relaxation parameter {lvl.omega} outside (0, {OMEGA_MAX}]")
        levels.append(lvl)
    return levels


def desc_kind(coarse: LevelDescriptor, fine: LevelDescriptor) -> str:
    """Which single attribute differs between two consecutive levels."""
    diffs = []
    if coarse.mesh.level != fine.mesh.level:
        diffs.append("h")
    if coarse.p != fine.p:
        diffs.append("p")
    if coarse.n_steps != fine.n_steps:
        diffs.append("tau")
    if coarse.k != fine.k:
        diffs.append("k")
    if len(diffs) != 1:
        raise ValueError(f"consecutive levels must differ in exactly one attribute, got {diffs}")
    return diffs[0]


class STMGPreconditioner:
    """V-cycle preconditioner for one batched space-time system.

    Parameters
    ----------
    equation, scheme : str
    mesh : MeshLevel
        Finest spatial mesh (with its parent chain).
    p, k : int
    tau : float
    n_steps : int
        Batch size on the finest level.
    coefficient : CoefficientField, optional
    strategy : sequence of str or 'auto'
        Coarsening steps from the finest level downwards.
    n_smooth : int
        Pre- and post-smoothing steps.
    omega : float, optional
        Fixed relaxation; estimated per level when omitted.
    """

    def __init__(self, equation, scheme, mesh, p, k, tau, n_steps, coefficient=None,
                 strategy="auto", n_smooth=1, omega=None, relaxation_iterations=20, seed=0,
                 timer: SectionTimer | None = None):
        if n_smooth < 1:
            raise ValueError("n_smooth must be >= 1")
        self.descriptors = plan_levels(mesh, p, k, n_steps, tau, scheme, strategy)
        self.levels = build_hierarchy(equation, scheme, self.descriptors, coefficient, omega,
                                      relaxation_iterations, seed)
        self.n_smooth = int(n_smooth)
        self.timer = timer
        self.n_cycles = 0

    @property
    def operator(self) -> SpaceTimeOperator:
        return self.levels[-1].operator

    def __call__(self, r):
        self.n_cycles += 1
        L = len(self.levels) - 1
        if self.timer is None:
            return v_cycle(self.levels, L, r, None, self.n_smooth, None)
        with self.timer.section("gmg"):
            return v_cycle(self.levels, L, r, None, self.n_smooth, self.timer)

    def describe(self) -> list:
        return [lvl.describe() for lvl in self.levels]
