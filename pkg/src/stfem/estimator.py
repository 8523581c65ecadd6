"""Estimator-style front end: ``fit`` marches a problem, ``predict`` evaluates it."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .driver import ProblemData, ProblemSpec, march
from .time_basis import LagrangeBasis

__all__ = ["SpaceTimeSolver"]

_PROBLEM_KEYS = ("dim", "lower", "upper", "T_final", "problem", "frequency", "shm_width",
                 "constant_value", "coefficient", "coefficient_value", "coefficient_random",
                 "coefficient_seed", "probes", "probe_samples", "compute_errors")


class SpaceTimeSolver(BaseEstimator):
    """Space-time finite element solver with multigrid-preconditioned GMRES.

    The constructor arguments are the discretization and solver settings;
    the problem (domain, data, coefficient) is passed to :meth:`fit`.

    Parameters
    ----------
    equation : {'heat', 'wave'}
    scheme : {'DG', 'CGP'}
        Time discretization.
    k : int
        Temporal order.
    p : int, optional
        Spatial degree, ``k`` by default.
    refinements : int
        Uniform refinements of the base mesh; the time grid gets one more.
    base_cells, initial_intervals, batch_size : int
    n_smooth : int
        Pre- and post-smoothing steps of the V-cycle.
    strategy : 'auto' or list of str
        Coarsening steps (``h``, ``p``, ``tau``, ``k``) from the finest level.
    abs_tol, rel_tol : float
        GMRES stopping tolerances.
    perturbation : float
        Random vertex displacement relative to the local edge length.

    Attributes
    ----------
    spec_ : ProblemSpec
    report_ : RunReport
    solution_ : ndarray, shape (n_steps, n_trial, n_dofs)
        Values at the temporal trial nodes of every step.
    velocity_ : ndarray or None
    n_iter_ : float
        Mean GMRES iterations per batch.
    """

    def __init__(self, equation="heat", scheme="DG", k=1, p=None, refinements=2, base_cells=1,
                 initial_intervals=1, batch_size=1, n_smooth=1, strategy="auto", omega=None,
                 abs_tol=1e-12, rel_tol=1e-12, max_iter=200, restart=100, perturbation=0.0,
                 perturbation_seed=0, seed=0):
        self.equation = equation
        self.scheme = scheme
        self.k = k
        self.p = p
        self.refinements = refinements
        self.base_cells = base_cells
        self.initial_intervals = initial_intervals
        self.batch_size = batch_size
        self.n_smooth = n_smooth
        self.strategy = strategy
        self.omega = omega
        self.abs_tol = abs_tol
        self.rel_tol = rel_tol
        self.max_iter = max_iter
        self.restart = restart
        self.perturbation = perturbation
        self.perturbation_seed = perturbation_seed
        self.seed = seed

    def _make_spec(self, problem) -> ProblemSpec:
        fields = dict(self.get_params())
        if problem is None:
            extra = {}
        elif isinstance(problem, str):
            extra = {"problem": problem}
        elif isinstance(problem, ProblemSpec):
            extra = {key: getattr(problem, key) for key in _PROBLEM_KEYS}
        elif isinstance(problem, dict):
            unknown = set(problem) - set(_PROBLEM_KEYS)
            if unknown:
                raise ValueError(f"unknown problem keys: {sorted(unknown)}")
            extra = dict(problem)
        else:
            raise TypeError("problem must be None, a name, a dict or a ProblemSpec")
        fields.update(extra)
        fields["keep_trajectory"] = True
        return ProblemSpec(**fields)

    def fit(self, X=None, y=None, data: ProblemData | None = None):
        """March the problem described by ``X`` over the whole time interval.

        Parameters
        ----------
        X : str, dict or ProblemSpec, optional
            Problem name (``'manufactured'``, ``'shm'``, ``'constant'``,
            ``'zero'``) or problem fields such as ``dim`` and ``T_final``.
        y : ignored
        data : ProblemData, optional
            Custom source, initial and boundary data callables.
        """
        self.spec_ = self._make_spec(X)
        self.report_ = march(self.spec_, data)
        self.solution_ = self.report_.trajectory
        self.velocity_ = self.report_.velocity
        self.n_iter_ = self.report_.mean_iterations
        self.dim_ = self.spec_.dim
        return self

    def _evaluate(self, traj, points, times):
        rep = self.report_
        dm = rep.dofmap
        pts = check_array(points, ensure_2d=True, dtype=float)
        if pts.shape[1] != self.dim_:
            raise ValueError(f"points must have {self.dim_} columns, got {pts.shape[1]}")
        t = np.atleast_1d(np.asarray(times, dtype=float))
        if t.ndim != 1 or not np.all(np.isfinite(t)):
            raise ValueError("times must be a finite 1D array")
        T = self.spec_.T_final
        if np.any(t < -1e-12) or np.any(t > T + 1e-12):
            raise ValueError(f"times must lie in [0, {T}]")
        mesh = dm.mesh
        rows = []
        for x in pts:
            cell, xi = mesh.locate(x)
            w = np.ones(1)
            for a in range(mesh.dim):
                w = np.kron(dm.basis_1d.values(np.array([xi[a]]))[:, 0], w)
            rows.append((dm.cell_to_global[cell], w))
        tau = rep.tau
        basis = LagrangeBasis(rep.trial_nodes)
        out = np.empty((t.size, pts.shape[0]))
        for i, ti in enumerate(t):
            s = int(min(max(np.floor(ti / tau), 0), rep.n_time_steps - 1))
            tv = basis.values(np.array([ti / tau - s]))[:, 0]
            u = tv @ traj[s]
            out[i] = [w @ u[d] for d, w in rows]
        return out

    def predict(self, points, times):
        """Discrete solution at ``points`` (n, d) and ``times`` (m,), shape (m, n)."""
        check_is_fitted(self, "solution_")
        return self._evaluate(self.solution_, points, times)

    def predict_velocity(self, points, times):
        check_is_fitted(self, "solution_")
        if self.velocity_ is None:
            raise ValueError("velocity is only available for the wave equation")
        return self._evaluate(self.velocity_, points, times)

    def score(self, X=None, y=None):
        """Negative space-time L2 error of the fitted run (needs an exact solution)."""
        check_is_fitted(self, "solution_")
        err = self.report_.errors.get("u")
        if err is None:
            raise ValueError("no exact solution available for scoring")
        return -err["L2L2"]
