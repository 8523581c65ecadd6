"""Time marching over batches, error norms, convergence studies and probes."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import __version__
from .exceptions import SolverDivergence
from .krylov import gmres
from .mesh import (MeshLevel, coefficient_shm, constant_coefficient, make_cartesian, perturb,
                   randomize_coefficient)
from .space_fem import SpatialDofMap, interpolate
from .st_operator import SpaceTimeOperator, StepState, build_rhs, velocity_update
from .stmg import STMGPreconditioner, plan_levels
from .time_basis import LagrangeBasis, gauss
from .timing import SectionTimer

log = logging.getLogger(__name__)

__all__ = [
    "ProblemSpec",
    "ProblemData",
    "RunReport",
    "problem_data",
    "build_mesh",
    "march",
    "error_norms",
    "work_metric",
    "eoc",
    "convergence_study",
    "shm_spec",
    "shm_demo",
    "DEFAULT_PROBES",
]

DEFAULT_PROBES = ((0.75, 0.0, 0.0), (0.0, 0.0, 0.75), (0.75, 0.1, 0.75))
PROBLEMS = ("manufactured", "shm", "constant", "zero")


@dataclass
class ProblemSpec:
    """Complete description of one run; every field is plain data.

    The number of time steps is ``initial_intervals * 2**(refinements + 1)``
    and the spatial mesh has ``base_cells * 2**refinements`` cells per axis.
    ``p=None`` uses ``p = k``.
    """

    equation: str = "heat"
    scheme: str = "DG"
    k: int = 1
    p: Optional[int] = None
    dim: int = 2
    lower: Optional[float] = None
    upper: Optional[float] = None
    T_final: float = 1.0
    refinements: int = 2
    base_cells: int = 1
    initial_intervals: int = 1
    batch_size: int = 1
    problem: str = "manufactured"
    frequency: float = 2.0
    shm_width: float = 0.3
    constant_value: float = 1.0
    coefficient: str = "constant"
    coefficient_value: float = 1.0
    coefficient_random: Optional[list] = None
    coefficient_seed: int = 0
    perturbation: float = 0.0
    perturbation_seed: int = 0
    abs_tol: float = 1e-12
    rel_tol: float = 1e-12
    max_iter: int = 200
    restart: int = 100
    n_smooth: int = 1
    strategy: object = "auto"
    omega: Optional[float] = None
    relaxation_iterations: int = 20
    probes: Optional[list] = None
    probe_samples: int = 16
    seed: int = 0
    bit_generator: str = "PCG64"
    compute_errors: bool = True
    keep_trajectory: bool = False

    _FLOATS = ("T_final", "frequency", "shm_width", "constant_value", "coefficient_value",
               "perturbation", "abs_tol", "rel_tol")
    _INTS = ("k", "dim", "refinements", "base_cells", "initial_intervals", "batch_size",
             "coefficient_seed", "perturbation_seed", "max_iter", "restart", "n_smooth",
             "relaxation_iterations", "probe_samples", "seed")
    _OPTIONAL_FLOATS = ("lower", "upper", "omega")

    def __post_init__(self):
        self._coerce()
        self.validate()

    def _coerce(self):
        # config files may deliver numbers as strings (YAML reads 1e-10 as text)
        def num(name, kind):
            value = getattr(self, name)
            if isinstance(value, bool):
                raise ValueError(f"{name}: expected a number, got {value!r}")
            try:
                out = kind(float(value)) if kind is int else float(value)
            except (TypeError, ValueError):
                raise ValueError(f"{name}: expected a number, got {value!r}") from None
            if kind is int and out != float(value):
                raise ValueError(f"{name}: expected an integer, got {value!r}")
            setattr(self, name, out)

        for name in self._FLOATS:
            num(name, float)
        for name in self._INTS:
            num(name, int)
        for name in self._OPTIONAL_FLOATS:
            if getattr(self, name) is not None:
                num(name, float)
        if self.p is not None:
            num("p", int)

    def validate(self):
        if self.equation not in ("heat", "wave"):
            raise ValueError(f"equation must be 'heat' or 'wave', got {self.equation!r}")
        if self.scheme not in ("DG", "CGP"):
            raise ValueError(f"scheme must be 'DG' or 'CGP', got {self.scheme!r}")
        kmin = 0 if self.scheme == "DG" else 1
        if not kmin <= self.k <= 12:
            raise ValueError(f"temporal order k={self.k} outside [{kmin}, 12] for {self.scheme}")
        if self.degree < 1:
            raise ValueError("spatial degree must be >= 1")
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        if self.refinements < 0 or self.base_cells < 1 or self.initial_intervals < 1:
            raise ValueError("refinements >= 0, base_cells >= 1 and initial_intervals >= 1 required")
        if self.T_final <= 0:
            raise ValueError("T_final must be positive")
        if self.batch_size < 1 or self.n_time_steps % self.batch_size:
            raise ValueError(f"batch size {self.batch_size} must divide {self.n_time_steps} time steps")
        if self.problem not in PROBLEMS:
            raise ValueError(f"problem must be one of {PROBLEMS}, got {self.problem!r}")
        if self.problem == "shm" and self.equation != "wave":
            raise ValueError("the shm problem is a wave problem")
        if self.coefficient not in ("constant", "shm"):
            raise ValueError("coefficient must be 'constant' or 'shm'")
        if self.n_smooth < 1 or self.max_iter < 1 or self.restart < 1:
            raise ValueError("n_smooth, max_iter and restart must be >= 1")
        if not 0.0 <= self.perturbation < 0.5:
            raise ValueError("perturbation must be in [0, 0.5)")
        if self.probe_samples < 1:
            raise ValueError("probe_samples must be >= 1")
        if self.shm_width <= 0:
            raise ValueError("shm_width must be positive")

    @property
    def degree(self) -> int:
        return self.k if self.p is None else self.p

    @property
    def n_time_steps(self) -> int:
        return self.initial_intervals * 2 ** (self.refinements + 1)

    @property
    def tau(self) -> float:
        return self.T_final / self.n_time_steps

    @property
    def extent(self):
        lo = (-1.0 if self.problem == "shm" else 0.0) if self.lower is None else float(self.lower)
        hi = 1.0 if self.upper is None else float(self.upper)
        return (lo, hi)

    def replace(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]


@dataclass
class ProblemData:
    """Callables of a problem.  Space-time callables take ``(points, t)``."""

    source: Optional[Callable] = None
    u0: Optional[Callable] = None
    v0: Optional[Callable] = None
    exact_u: Optional[Callable] = None
    exact_v: Optional[Callable] = None
    dirichlet: Optional[Callable] = None
    coefficient_value: float = 1.0


def _zero(points, t=None):
    return np.zeros(np.shape(points)[0])


def manufactured_data(equation: str, dim: int, frequency: float = 2.0, kappa: float = 1.0) -> ProblemData:
    """``u = sin(2 pi f t) prod_i sin(2 pi f x_i)`` and the matching source.

    For the heat equation ``f = u_t - kappa * lap(u)``; for the wave
    equation ``f = u_tt - kappa * lap(u) = (kappa d - 1) (2 pi f)^2 u``.
    """
    w = 2.0 * np.pi * frequency

    def space(x):
        return np.prod(np.sin(w * x), axis=-1)

    def u(x, t):
        return np.sin(w * t) * space(x)

    def ut(x, t):
        return w * np.cos(w * t) * space(x)

    if equation == "heat":
        def f(x, t):
            return ut(x, t) + kappa * dim * w ** 2 * u(x, t)
        return ProblemData(f, lambda x: u(x, 0.0), None, u, None, u, kappa)

    def f(x, t):
        return (kappa * dim - 1.0) * w ** 2 * u(x, t)
    return ProblemData(f, lambda x: u(x, 0.0), lambda x: ut(x, 0.0), u, ut, u, kappa)


def shm_initial(width: float):
    """Compactly supported radial pulse of radius ``width`` centred at 0."""
    def u0(x):
        q = np.sum((np.asarray(x) / width) ** 2, axis=-1)
        return np.where(q < 1.0, np.exp(-q) * (1.0 - q), 0.0)
    return u0


def problem_data(spec: ProblemSpec) -> ProblemData:
    if spec.problem == "manufactured":
        return manufactured_data(spec.equation, spec.dim, spec.frequency, spec.coefficient_value)
    if spec.problem == "shm":
        return ProblemData(None, shm_initial(spec.shm_width), _zero_initial, None, None, None)
    if spec.problem == "constant":
        c = spec.constant_value

        def const(x, t=None):
            return np.full(np.shape(x)[0], c)
        return ProblemData(None, lambda x: const(x), _zero_initial, const, _zero, const)
    return ProblemData(None, _zero_initial, _zero_initial, _zero, _zero, None)


def _zero_initial(x):
    return np.zeros(np.shape(x)[0])


def build_mesh(spec: ProblemSpec) -> MeshLevel:
    mesh = make_cartesian(spec.dim, spec.extent, spec.refinements, spec.base_cells)
    if spec.perturbation > 0:
        mesh = perturb(mesh, spec.perturbation, spec.perturbation_seed, spec.bit_generator)
    return mesh


def build_coefficient(spec: ProblemSpec, mesh: MeshLevel):
    if spec.coefficient == "shm":
        coef = coefficient_shm(spec.dim)
    else:
        coef = constant_coefficient(spec.coefficient_value)
    if spec.coefficient_random:
        lo, hi = spec.coefficient_random
        coef = randomize_coefficient(coef, lo, hi, spec.coefficient_seed, mesh.hierarchy()[0],
                                     spec.bit_generator)
    return coef


# ------------------------------------------------------------------- errors

class ErrorAccumulator:
    """Space-time error norms accumulated step by step.

    L2(L2) uses ``k+2`` Gauss points per interval and ``p+2`` per spatial
    axis; the L-infinity norms take the maximum over the same samples.
    """

    def __init__(self, dofmap: SpatialDofMap, trial_nodes, k: int):
        self.dofmap = dofmap
        self.basis = LagrangeBasis(trial_nodes)
        self.tq = gauss(k + 2)
        self.tvals = self.basis.values(self.tq.points)
        geo = dofmap.geometry(dofmap.p + 2)
        self.xq = geo["x"].reshape(-1, dofmap.dim)
        self.jxw = geo["jxw"]
        self.sq = geo["rule"].points
        self.l2l2_sq = 0.0
        self.linf_l2 = 0.0
        self.linf_linf = 0.0

    def add(self, U, t0, tau, exact):
        """``U`` holds the values at the trial nodes, shape (k+1, n_x)."""
        Uq = self.tvals.T @ U
        vals = self.dofmap.evaluate(Uq, self.sq)
        for q, tq in enumerate(self.tq.points):
            t = t0 + tau * tq
            ex = np.asarray(exact(self.xq, t), float).reshape(vals[q].shape)
            e = vals[q] - ex
            l2 = float(np.sum(self.jxw * e * e))
            self.l2l2_sq += tau * self.tq.weights[q] * l2
            self.linf_l2 = max(self.linf_l2, math.sqrt(l2))
            self.linf_linf = max(self.linf_linf, float(np.abs(e).max()))

    def result(self) -> dict:
        return {"L2L2": math.sqrt(self.l2l2_sq), "LinfL2": self.linf_l2, "LinfLinf": self.linf_linf}


def error_norms(dofmap: SpatialDofMap, trial_nodes, k: int, trajectory, t_grid, exact) -> dict:
    """Error norms of a trajectory of per-interval trial values.

    ``trajectory[s]`` has shape ``(len(trial_nodes), n_x)`` and covers
    ``[t_grid[s], t_grid[s+1]]``.
    """
    acc = ErrorAccumulator(dofmap, trial_nodes, k)
    for s, U in enumerate(trajectory):
        acc.add(np.asarray(U, float), t_grid[s], t_grid[s + 1] - t_grid[s], exact)
    return acc.result()


# ------------------------------------------------------------------- probes

class ProbeRecorder:
    """Point values of the discrete solution at dense output times."""

    def __init__(self, dofmap: SpatialDofMap, points, trial_nodes, samples: int):
        self.points = [tuple(map(float, p)) for p in points]
        mesh = dofmap.mesh
        self.dofs, self.weights = [], []
        for p in self.points:
            if len(p) != mesh.dim:
                raise ValueError(f"probe {p} does not have {mesh.dim} coordinates")
            cell, xi = mesh.locate(np.array(p))
            w = np.ones(1)
            for a in range(mesh.dim):
                w = np.kron(dofmap.basis_1d.values(np.array([xi[a]]))[:, 0], w)
            self.dofs.append(dofmap.cell_to_global[cell])
            self.weights.append(w)
        self.dofs = np.array(self.dofs)
        self.weights = np.array(self.weights)
        self.t_hat = np.arange(1, samples + 1) / samples
        self.tvals = LagrangeBasis(trial_nodes).values(self.t_hat)
        self.times = []
        self.values = []

    def point_values(self, u):
        return np.einsum("pl,...pl->...p", self.weights, u[..., self.dofs])

    def start(self, u0, t0=0.0):
        self.times.append(t0)
        self.values.append(self.point_values(u0))

    def add(self, U, t0, tau):
        pv = self.point_values(U)  # (k+1, n_probes)
        self.times.extend(t0 + tau * self.t_hat)
        self.values.extend(self.tvals.T @ pv)

    def result(self) -> dict:
        return {"points": [list(p) for p in self.points], "times": list(map(float, self.times)),
                "values": np.array(self.values).T.tolist()}


# ------------------------------------------------------------------- report

@dataclass
class RunReport:
    config: dict
    n_dofs_space: int = 0
    n_time_steps: int = 0
    n_temporal_dofs: int = 0
    n_dofs: int = 0
    tau: float = 0.0
    h_max: float = 0.0
    errors: dict = field(default_factory=dict)
    max_jump: float = 0.0
    iterations: list = field(default_factory=list)
    final_residuals: list = field(default_factory=list)
    converged: bool = True
    work: float = 0.0
    wall_time: float = 0.0
    sections: dict = field(default_factory=dict)
    hierarchy: list = field(default_factory=list)
    probes: Optional[dict] = None
    deviations: list = field(default_factory=list)
    version: str = __version__
    trajectory: Optional[np.ndarray] = field(default=None, repr=False)
    velocity: Optional[np.ndarray] = field(default=None, repr=False)
    trial_nodes: Optional[np.ndarray] = field(default=None, repr=False)
    dofmap: Optional[SpatialDofMap] = field(default=None, repr=False)

    @property
    def mean_iterations(self) -> float:
        return float(np.mean(self.iterations)) if self.iterations else 0.0

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name in ("trajectory", "velocity", "trial_nodes", "dofmap"):
                continue
            out[f.name] = getattr(self, f.name)
        out["mean_iterations"] = self.mean_iterations
        return _jsonable(out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def work_metric(report_or_records) -> float:
    """``sum_i N_t * N_x * N_iter_i`` over all solved systems.

    Accepts a :class:`RunReport` or an iterable of ``(N_t, N_x, N_iter)``.
    """
    if isinstance(report_or_records, RunReport):
        r = report_or_records
        n_t = r.n_temporal_dofs * r.config.get("batch_size", 1)
        return float(sum(n_t * r.n_dofs_space * it for it in r.iterations))
    return float(sum(nt * nx * it for nt, nx, it in report_or_records))


def eoc(errors) -> list:
    """``log2(e_r / e_{r+1})`` between consecutive refinements."""
    e = np.asarray(errors, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return list(np.log2(e[:-1] / e[1:]))


# -------------------------------------------------------------------- march

def _trial_values(op: SpaceTimeOperator, u, u_prev):
    """Per-step values at all trial nodes, shape (c, k+1, n_x)."""
    if op.scheme == "DG":
        return u
    prev = np.concatenate([u_prev[None], u[:-1, -1]], axis=0)
    return np.concatenate([prev[:, None], u], axis=1)


def plan_description(spec: ProblemSpec) -> list:
    """Level plan of the preconditioner without building any operator."""
    mesh = make_cartesian(spec.dim, spec.extent, spec.refinements, spec.base_cells)
    levels = plan_levels(mesh, spec.degree, spec.k, spec.batch_size, spec.tau, spec.scheme,
                         spec.strategy)
    out = []
    for d in levels:
        info = d.describe()
        n_x = int(np.prod([n * d.p + 1 for n in d.mesh.cells_per_axis]))
        n_t = d.k + 1 if spec.scheme == "DG" else d.k
        info["size"] = n_x * n_t * d.n_steps
        out.append(info)
    return out


def march(spec: ProblemSpec, data: ProblemData | None = None, timer: SectionTimer | None = None,
          probes=None) -> RunReport:
    """Solve a whole run batch by batch.

    Raises
    ------
    SolverDivergence
        When GMRES misses its tolerance; the partial report is attached.
    """
    timer = timer or SectionTimer()
    timer.start()
    t_wall = time.perf_counter()
    data = data or problem_data(spec)
    mesh = build_mesh(spec)
    coef = build_coefficient(spec, mesh)
    c, tau = spec.batch_size, spec.tau
    pc = STMGPreconditioner(spec.equation, spec.scheme, mesh, spec.degree, spec.k, tau, c, coef,
                            spec.strategy, spec.n_smooth, spec.omega, spec.relaxation_iterations,
                            spec.seed, timer)
    op = pc.operator
    dm = op.mass.dofmap
    weights = op.weights
    report = RunReport(config=spec.to_dict(), n_dofs_space=dm.n_dofs, n_time_steps=spec.n_time_steps,
                       n_temporal_dofs=op.n_t, tau=tau, h_max=float(mesh.cell_sizes().max()),
                       hierarchy=pc.describe(), trial_nodes=weights.trial_nodes, dofmap=dm)
    report.n_dofs = dm.n_dofs * op.n_t * spec.n_time_steps
    if spec.problem == "shm":
        report.deviations.append(f"initial pulse width s={spec.shm_width} (desk resolution)")

    is_wave = spec.equation == "wave"
    u0 = interpolate(dm, data.u0) if data.u0 is not None else np.zeros(dm.n_dofs)
    v0 = None
    if is_wave:
        v0 = interpolate(dm, data.v0) if data.v0 is not None else np.zeros(dm.n_dofs)
    state = StepState(u0, v0)

    errs_u = errs_v = None
    if spec.compute_errors and data.exact_u is not None:
        errs_u = ErrorAccumulator(dm, weights.trial_nodes, spec.k)
        if is_wave and data.exact_v is not None:
            errs_v = ErrorAccumulator(dm, weights.trial_nodes, spec.k)
    probe_points = probes if probes is not None else spec.probes
    recorder = None
    if probe_points:
        recorder = ProbeRecorder(dm, probe_points, weights.trial_nodes, spec.probe_samples)
        recorder.start(u0)
    traj_u, traj_v = [], []
    M = op.mass

    def apply_op(x):
        with timer.section("operator"):
            return op.apply(x)

    n_batches = spec.n_time_steps // c
    for b in range(n_batches):
        t0 = b * c * tau
        rhs = build_rhs(op, data.source, state, t0, data.dirichlet)
        x0 = np.broadcast_to(state.u_prev, op.shape3).copy()
        x0[..., op.constrained] = rhs[..., op.constrained]
        x, stats = gmres(apply_op, rhs, x0, pc, spec.abs_tol, spec.rel_tol, spec.max_iter, spec.restart)
        report.iterations.append(stats.iterations)
        report.final_residuals.append(stats.final_residual)
        if not stats.converged:
            report.converged = False
            timer.stop()
            report.sections = timer.breakdown()
            report.wall_time = time.perf_counter() - t_wall
            report.work = work_metric(report)
            raise SolverDivergence(
                f"batch {b}: GMRES residual {stats.final_residual:.3e} after {stats.iterations} "
                f"iterations (threshold {stats.threshold:.3e})", report)
        v = velocity_update(op, x, state) if is_wave else None
        U = _trial_values(op, x, state.u_prev)
        V = _trial_values(op, v, state.v_prev) if is_wave else None
        for s in range(c):
            ts = t0 + s * tau
            if errs_u is not None:
                errs_u.add(U[s], ts, tau, data.exact_u)
            if errs_v is not None:
                errs_v.add(V[s], ts, tau, data.exact_v)
            if recorder is not None:
                recorder.add(U[s], ts, tau)
        if spec.scheme == "DG":
            start_vals = LagrangeBasis(weights.trial_nodes).values(np.array([0.0]))[:, 0]
            prevs = np.concatenate([state.u_prev[None], x[:-1, -1]], axis=0)
            jumps = np.einsum("j,sjx->sx", start_vals, x) - prevs
            jn = np.sqrt(np.maximum(np.einsum("sx,sx->s", jumps, M.apply(jumps)), 0.0))
            report.max_jump = max(report.max_jump, float(jn.max()))
        if spec.keep_trajectory:
            traj_u.append(U)
            if is_wave:
                traj_v.append(V)
        state = StepState(x[-1, -1].copy(), None if v is None else v[-1, -1].copy())

    timer.stop()
    report.wall_time = time.perf_counter() - t_wall
    report.sections = timer.breakdown()
    if errs_u is not None:
        report.errors["u"] = errs_u.result()
    if errs_v is not None:
        report.errors["v"] = errs_v.result()
    if recorder is not None:
        report.probes = recorder.result()
    if spec.keep_trajectory:
        report.trajectory = np.concatenate(traj_u, axis=0)
        if is_wave:
            report.velocity = np.concatenate(traj_v, axis=0)
    report.work = work_metric(report)
    return report


def convergence_study(spec: ProblemSpec, refinements, data: ProblemData | None = None) -> dict:
    """Runs at several refinement levels plus EOC of every recorded norm."""
    reports = [march(spec.replace(refinements=r), data) for r in refinements]
    table = []
    for i, (r, rep) in enumerate(zip(refinements, reports)):
        row = {"r": r, "dofs": rep.n_dofs, "mean_iterations": rep.mean_iterations, "work": rep.work}
        for var, norms in rep.errors.items():
            for name, val in norms.items():
                key = f"{var}_{name}"
                row[key] = val
                if i > 0:
                    prev = reports[i - 1].errors[var][name]
                    row[f"eoc_{key}"] = float(np.log2(prev / val)) if val > 0 and prev > 0 else float("nan")
                else:
                    row[f"eoc_{key}"] = float("nan")
        table.append(row)
    return {"reports": reports, "table": table}


# ---------------------------------------------------------------- SHM demo

def shm_spec(**overrides) -> ProblemSpec:
    """Layered-coefficient wave problem on ``[-1, 1]^3 x [0, 2]`` at desk size.

    Twenty initial intervals give ``tau = 0.025`` at ``refinements=1``.  The
    pulse excites modes up to the mesh frequency, and coarser steps leave
    them unresolved, where the dissipative DG and the energy-conserving CGP
    schemes disagree by about 20% at the probes.
    """
    base = dict(equation="wave", scheme="DG", k=2, dim=3, lower=-1.0, upper=1.0, T_final=2.0,
                refinements=1, base_cells=5, initial_intervals=20, problem="shm", coefficient="shm",
                shm_width=0.3, abs_tol=1e-10, rel_tol=1e-12, probes=[list(p) for p in DEFAULT_PROBES])
    base.update(overrides)
    return ProblemSpec(**base)


def shm_demo(spec: ProblemSpec | None = None, probes=None, timer: SectionTimer | None = None,
             **overrides) -> RunReport:
    """Run the layered-coefficient demo and record probe signals."""
    spec = spec if spec is not None else shm_spec(**overrides)
    if spec.equation != "wave":
        raise ValueError("the demo solves the wave equation")
    points = probes if probes is not None else (spec.probes or [list(p) for p in DEFAULT_PROBES])
    return march(spec, timer=timer, probes=points)
