"""Temporal quadrature, Lagrange bases and the DG(k) / CGP(k) weight matrices.

All quantities live on the reference interval [0, 1].  The step size is
applied where the weights are used (see :mod:`stfem.st_operator`), so one
set of weights serves every level of a temporal multigrid hierarchy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.polynomial import legendre as npleg

__all__ = [
    "QuadratureRule",
    "LagrangeBasis",
    "TemporalWeights",
    "gauss",
    "gauss_radau_right",
    "gauss_lobatto",
    "dg_weights",
    "cgp_weights",
    "temporal_weights",
]

MAX_ORDER = 12


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature rule on [0, 1]."""

    points: np.ndarray
    weights: np.ndarray
    kind: Literal["GaussRadauRight", "GaussLobatto", "Gauss"]

    def __len__(self):
        return len(self.points)

    def integrate(self, values):
        """Integrate sampled values; the quadrature axis is the last one."""
        return np.asarray(values) @ self.weights


def _newton_polish(coef, x, tol=1e-15, maxiter=100):
    # Newton on the Legendre series `coef`; roots from the companion
    # matrix are already close, this only removes eigen-solver noise.
    dcoef = npleg.legder(coef)
    x = np.array(x, dtype=float)
    for _ in range(maxiter):
        dx = npleg.legval(x, coef) / npleg.legval(x, dcoef)
        x -= dx
        if np.all(np.abs(dx) <= tol):
            break
    return x


def _weights_from_nodes(nodes):
    # w_i = int_0^1 l_i(t) dt, computed with a Gauss rule exact for deg n-1
    g = gauss(max(1, (len(nodes) + 1) // 2 + 1))
    basis = LagrangeBasis(nodes)
    return basis.values(g.points) @ g.weights


def gauss(n: int) -> QuadratureRule:
    """n-point Gauss-Legendre rule on [0, 1], exact for degree 2n-1."""
    if n < 1:
        raise ValueError(f"Gauss rule needs n >= 1, got {n}")
    x, w = npleg.leggauss(n)
    return QuadratureRule(0.5 * (x + 1.0), 0.5 * w, "Gauss")


def gauss_radau_right(n: int) -> QuadratureRule:
    """n-point Gauss-Radau rule on [0, 1] whose last node is fixed at 1.

    The free nodes are the roots of ``(P_{n-1} - P_n) / (1 - x)`` on
    [-1, 1].  Exact for polynomials of degree ``2n - 2``.
    """
    if n < 1:
        raise ValueError(f"Gauss-Radau rule needs n >= 1, got {n}")
    if n == 1:
        return QuadratureRule(np.array([1.0]), np.array([1.0]), "GaussRadauRight")
    coef = np.zeros(n + 1)
    coef[n - 1] = 1.0
    coef[n] = -1.0
    roots = np.sort(npleg.legroots(coef).real)[:-1]
    x = np.sort(_newton_polish(coef, roots))
    pts = np.concatenate([0.5 * (x + 1.0), [1.0]])
    return QuadratureRule(pts, _weights_from_nodes(pts), "GaussRadauRight")


def gauss_lobatto(n: int) -> QuadratureRule:
    """n-point Gauss-Lobatto rule on [0, 1] with both end points as nodes.

    Interior nodes are the roots of ``P'_{n-1}``; exact for degree ``2n - 3``.
    """
    if n < 2:
        raise ValueError(f"Gauss-Lobatto rule needs n >= 2, got {n}")
    interior = np.empty(0)
    if n > 2:
        coef = npleg.legder(np.eye(n)[n - 1])
        interior = np.sort(_newton_polish(coef, np.sort(npleg.legroots(coef).real)))
    pts = np.concatenate([[0.0], 0.5 * (interior + 1.0), [1.0]])
    return QuadratureRule(pts, _weights_from_nodes(pts), "GaussLobatto")


class LagrangeBasis:
    """Cardinal polynomials on a set of distinct nodes."""

    def __init__(self, nodes):
        self.nodes = np.asarray(nodes, dtype=float)
        if self.nodes.ndim != 1 or len(self.nodes) == 0:
            raise ValueError("nodes must be a non-empty 1D sequence")
        if len(np.unique(self.nodes)) != len(self.nodes):
            raise ValueError("nodes must be distinct")
        diff = self.nodes[:, None] - self.nodes[None, :]
        np.fill_diagonal(diff, 1.0)
        self._denom = np.prod(diff, axis=1)

    @property
    def degree(self) -> int:
        return len(self.nodes) - 1

    def __len__(self):
        return len(self.nodes)

    def _check_index(self, i):
        if not 0 <= i <= self.degree:
            raise ValueError(f"basis index {i} out of range [0, {self.degree}]")

    def values(self, t) -> np.ndarray:
        """Matrix ``V[i, q] = l_i(t_q)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = len(self.nodes)
        tm = t[None, :] - self.nodes[:, None]  # (n, nq)
        out = np.empty((n, len(t)))
        for i in range(n):
            out[i] = np.prod(np.delete(tm, i, axis=0), axis=0) / self._denom[i]
        return out

    def derivatives(self, t) -> np.ndarray:
        """Matrix ``D[i, q] = l_i'(t_q)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = len(self.nodes)
        tm = t[None, :] - self.nodes[:, None]
        out = np.zeros((n, len(t)))
        for i in range(n):
            others = [m for m in range(n) if m != i]
            for l in others:
                rest = [m for m in others if m != l]
                out[i] += np.prod(tm[rest], axis=0)
            out[i] /= self._denom[i]
        return out

    def eval(self, i: int, t: float) -> float:
        self._check_index(i)
        return float(self.values([t])[i, 0])

    def deriv(self, i: int, t: float) -> float:
        self._check_index(i)
        return float(self.derivatives([t])[i, 0])


def lagrange_eval(basis: LagrangeBasis, i: int, t: float) -> float:
    return basis.eval(i, t)


def lagrange_deriv(basis: LagrangeBasis, i: int, t: float) -> float:
    return basis.deriv(i, t)


@dataclass(frozen=True)
class TemporalWeights:
    """Reference-interval weights of one time discretization.

    ``m_tau`` and ``beta`` must be multiplied by the step size at use sites.
    For CGP the first trial node carries the continuity constraint; its
    couplings are split off into ``alpha`` (derivative) and ``beta`` (value).

    Attributes
    ----------
    trial_nodes : ndarray
        Nodes of the full trial basis (k + 1 of them for both schemes).
    dof_nodes : ndarray
        Nodes of the unknowns actually solved for (``n_t`` of them).
    """

    scheme: Literal["DG", "CGP"]
    k: int
    n_t: int
    m_tau: np.ndarray
    a_tau: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    trial_nodes: np.ndarray = field(repr=False)
    dof_nodes: np.ndarray = field(repr=False)

    @property
    def trial_basis(self) -> LagrangeBasis:
        return LagrangeBasis(self.trial_nodes)

    def trial_values(self, t) -> np.ndarray:
        """Trial basis at reference times, shape ``(k + 1, len(t))``.

        For CGP row 0 belongs to the constrained (previous end) value.
        """
        return self.trial_basis.values(t)


def _check_order(k, kmin, name):
    if not isinstance(k, (int, np.integer)) or k < kmin:
        raise ValueError(f"{name} needs integer order k >= {kmin}, got {k!r}")
    if k > MAX_ORDER:
        raise ValueError(f"{name} order k={k} exceeds supported maximum {MAX_ORDER}")


def dg_weights(k: int) -> TemporalWeights:
    """Weights of DG(k) from the jump-penalised variational form.

    ``a_tau[i, j] = int xi_j' xi_i + xi_j(0) xi_i(0)`` and
    ``alpha[i] = xi_i(0)``, with the Lagrange basis on the right Radau nodes.
    """
    _check_order(k, 0, "DG")
    nodes = gauss_radau_right(k + 1).points
    basis = LagrangeBasis(nodes)
    q = gauss(k + 1)
    v = basis.values(q.points)
    d = basis.derivatives(q.points)
    v0 = basis.values([0.0])[:, 0]
    m = (v * q.weights) @ v.T
    a = (v * q.weights) @ d.T + np.outer(v0, v0)
    return TemporalWeights("DG", k, k + 1, m, a, v0.copy(), np.zeros(k + 1),
                           nodes, nodes)


def cgp_weights(k: int) -> TemporalWeights:
    """Weights of CGP(k): Lobatto trial basis, test basis on the last k nodes.

    ``m_tau[i, j-1] = int xi_j psi_i``, ``a_tau[i, j-1] = int xi_j' psi_i``
    for j >= 1, ``beta[i] = int xi_0 psi_i`` and ``alpha[i] = int xi_0' psi_i``.
    """
    _check_order(k, 1, "CGP")
    nodes = gauss_lobatto(k + 1).points
    trial = LagrangeBasis(nodes)
    test = LagrangeBasis(nodes[1:])
    q = gauss(k + 1)
    v = trial.values(q.points)
    d = trial.derivatives(q.points)
    w = test.values(q.points) * q.weights
    mass = w @ v.T  # (k, k+1)
    adv = w @ d.T
    return TemporalWeights("CGP", k, k, mass[:, 1:].copy(), adv[:, 1:].copy(),
                           adv[:, 0].copy(), mass[:, 0].copy(), nodes, nodes[1:])


def temporal_weights(scheme: str, k: int) -> TemporalWeights:
    scheme = scheme.upper()
    if scheme == "DG":
        return dg_weights(k)
    if scheme == "CGP":
        return cgp_weights(k)
    raise ValueError(f"unknown time discretization {scheme!r}; expected 'DG' or 'CGP'")
