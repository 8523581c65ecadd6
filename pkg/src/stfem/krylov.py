"""Restarted GMRES with right preconditioning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericFailure

log = logging.getLogger(__name__)

__all__ = ["SolveStats", "gmres"]


@dataclass
class SolveStats:
    iterations: int = 0
    final_residual: float = np.nan
    converged: bool = False
    residual_history: list = field(default_factory=list)
    initial_residual: float = np.nan
    threshold: float = np.nan

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "initial_residual": self.initial_residual,
            "converged": self.converged,
            "residual_history": list(map(float, self.residual_history)),
        }


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericFailure(f"non-finite values in {what}")


def gmres(apply_op, b, x0=None, apply_precond=None, abs_tol=1e-12, rel_tol=1e-12,
          max_iter=500, restart=100, reorth_tol=1e-10):
    """Solve ``A x = b`` with right-preconditioned restarted GMRES.

    The residual minimised is the true (unpreconditioned) residual, so the
    stopping test ``||b - A x|| <= max(abs_tol, rel_tol * ||b - A x0||)``
    applies to it directly.  Orthogonalisation is modified Gram-Schmidt with
    a second pass when the new direction keeps a component above
    ``reorth_tol`` along the existing basis.

    Returns
    -------
    x : ndarray
    stats : SolveStats
        ``residual_history[0]`` is the initial residual; one entry follows
        per iteration.  On ``max_iter`` the best iterate is returned with
        ``converged=False``.
    """
    b = np.asarray(b, dtype=float)
    shape = b.shape
    b = b.ravel()
    n = b.size
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float).ravel()
    precond = (lambda v: v) if apply_precond is None else apply_precond
    op = lambda v: np.asarray(apply_op(v.reshape(shape)), dtype=float).ravel()
    pc = lambda v: np.asarray(precond(v.reshape(shape)), dtype=float).ravel()

    r = b - op(x) if x0 is not None else b.copy()
    beta = float(np.linalg.norm(r))
    _check_finite(beta, "initial residual")
    stats = SolveStats(initial_residual=beta, residual_history=[beta])
    threshold = max(abs_tol, rel_tol * beta)
    stats.threshold = threshold
    if beta <= threshold:
        stats.final_residual, stats.converged = beta, True
        return x.reshape(shape), stats

    m = max(1, min(restart, n))
    while True:
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        j_done = 0
        res = beta
        for j in range(m):
            Z[j] = pc(V[j])
            w = op(Z[j])
            _check_finite(w, "Krylov vector")
            for i in range(j + 1):
                H[i, j] = V[i] @ w
                w -= H[i, j] * V[i]
            wn = np.linalg.norm(w)
            if wn > 0 and np.max(np.abs(V[:j + 1] @ w)) > reorth_tol * wn:
                corr = V[:j + 1] @ w
                w -= corr @ V[:j + 1]
                H[:j + 1, j] += corr
                wn = np.linalg.norm(w)
            H[j + 1, j] = wn
            for i in range(j):
                tmp = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = tmp
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            res = abs(g[j + 1])
            stats.iterations += 1
            stats.residual_history.append(res)
            j_done = j + 1
            if res <= threshold or wn == 0.0 or stats.iterations >= max_iter:
                break
            V[j + 1] = w / wn

        y = np.linalg.solve(np.triu(H[:j_done, :j_done]), g[:j_done]) if j_done else np.zeros(0)
        x = x + y @ Z[:j_done]
        r = b - op(x)
        beta = float(np.linalg.norm(r))
        _check_finite(beta, "residual")
        if beta <= threshold:
            stats.converged = True
            break
        if stats.iterations >= max_iter:
            break
        if res <= threshold:
            log.debug("GMRES: true residual %.3e above estimate %.3e, restarting", beta, res)
    stats.final_residual = beta
    if not stats.converged:
        log.warning("GMRES stopped after %d iterations, residual %.3e > %.3e",
                    stats.iterations, beta, threshold)
    return x.reshape(shape), stats
