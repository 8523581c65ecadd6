"""Continuous Q_p finite elements on tensor-product meshes, matrix-free.

Cell kernels are evaluated with sum factorization: the local coefficient
tensor of shape ``(p+1,)*d`` is contracted with one-dimensional value or
derivative matrices one axis at a time, weighted at the quadrature points,
and contracted back with the transposed matrices.  Local results are
scattered to the global vector with a sparse local-to-global map.

Local arrays use the axis order ``(..., z, y, x)`` so that the x index runs
fastest, matching the lexicographic numbering of :mod:`stfem.mesh`.
"""
from __future__ import annotations

import itertools

import numpy as np
import scipy.sparse as sp

from .exceptions import SizeLimitError
from .mesh import CoefficientField, MeshLevel, constant_coefficient
from .time_basis import LagrangeBasis, gauss, gauss_lobatto

__all__ = [
    "SpatialDofMap",
    "SpatialOperator",
    "apply_mass",
    "apply_stiffness",
    "assemble_dense",
    "apply_dirichlet",
    "apply_combined",
    "l2_project_function",
    "interpolate",
    "assemble_load",
    "DENSE_LIMIT",
]

DENSE_LIMIT = 5000


def contract_axis(mat, x, axis):
    """Contract ``mat`` (m, n) with axis ``axis`` (negative) of ``x``.

    The tensor is viewed as ``(lead, n, trail)`` so the product runs as one
    batched matmul on contiguous memory.
    """
    shape = x.shape
    ax = axis % x.ndim
    n = shape[ax]
    lead = int(np.prod(shape[:ax], dtype=int))
    trail = int(np.prod(shape[ax + 1:], dtype=int))
    if trail == 1:
        y = x.reshape(lead, n) @ mat.T
    else:
        y = np.matmul(mat, x.reshape(lead, n, trail))
    return y.reshape(shape[:ax] + (mat.shape[0],) + shape[ax + 1:])


def tensor_apply(mats, x):
    """Apply ``mats[a]`` along spatial axis ``a`` (a=0 is x) of local tensors."""
    d = len(mats)
    for a, m in enumerate(mats):
        x = contract_axis(m, x, -1 - a)
    return x


class SpatialDofMap:
    """Global numbering of the Q_p support points on a tensor-product mesh.

    Support points are the Gauss-Lobatto nodes of each cell.  Global DoFs
    form a structured grid of ``cells_per_axis * p + 1`` points per axis.
    """

    def __init__(self, mesh: MeshLevel, p: int):
        if p < 1:
            raise ValueError(f"spatial degree must be >= 1, got {p}")
        self.mesh = mesh
        self.p = p
        self.dim = mesh.dim
        self.n_1d = p + 1
        self.grid_shape = tuple(n * p + 1 for n in mesh.cells_per_axis)
        self.n_dofs = int(np.prod(self.grid_shape))
        self.nodes_1d = gauss_lobatto(p + 1).points
        self.basis_1d = LagrangeBasis(self.nodes_1d)

        strides = np.cumprod((1,) + self.grid_shape[:-1])
        local = np.array([o[::-1] for o in itertools.product(range(p + 1), repeat=self.dim)])
        cidx = mesh.cell_index * p
        self.cell_to_global = (cidx[:, None, :] + local[None, :, :]) @ strides
        self.n_local = local.shape[0]

        gidx = np.indices(self.grid_shape[::-1]).reshape(self.dim, -1)[::-1].T
        on_bnd = np.any((gidx == 0) | (gidx == np.array(self.grid_shape) - 1), axis=1)
        self.boundary_mask = on_bnd
        self.boundary_dofs = np.flatnonzero(on_bnd)

        rows = self.cell_to_global.reshape(-1)
        cols = np.arange(rows.size)
        # scatter: global <- local (sum over cells)
        self.scatter = sp.csr_matrix((np.ones(rows.size), (rows, cols)),
                                     shape=(self.n_dofs, rows.size))
        self._geometry = {}
        self._support_points = None

    @property
    def n_cells(self):
        return self.mesh.n_cells

    def gather(self, u):
        """Local coefficient tensors, shape ``(..., n_cells) + (p+1,)*d``."""
        loc = u[..., self.cell_to_global]
        return loc.reshape(u.shape[:-1] + (self.n_cells,) + (self.n_1d,) * self.dim)

    def scatter_add(self, loc):
        """Sum local tensors into global vectors; inverse of :meth:`gather`."""
        lead = loc.shape[:-1 - self.dim]
        flat = loc.reshape(int(np.prod(lead, dtype=int)), -1)
        out = (self.scatter @ flat.T).T
        return out.reshape(lead + (self.n_dofs,))

    def reference_points(self, points_1d):
        """Tensor grid of 1D points, shape ``(n**d, d)``, x fastest."""
        return np.array([q[::-1] for q in itertools.product(points_1d, repeat=self.dim)])

    def geometry(self, n_quad: int):
        """Cached quadrature geometry for an ``n_quad``-point Gauss rule per axis.

        Returns a dict with physical points ``x`` (n_cells, nq, d), inverse
        Jacobians ``jinv`` and ``jxw`` (determinant times weight).
        """
        if n_quad not in self._geometry:
            q = gauss(n_quad)
            pts = self.reference_points(q.points)
            w = np.prod(self.reference_points(q.weights), axis=1)
            x, jac = self.mesh.map_points(pts)
            det = np.linalg.det(jac)
            if np.any(det <= 0):
                raise ValueError("non-positive Jacobian determinant")
            self._geometry[n_quad] = {
                "rule": q,
                "x": x,
                "jinv": np.linalg.inv(jac),
                "jxw": det * w,
            }
        return self._geometry[n_quad]

    def support_points(self) -> np.ndarray:
        """Physical coordinates of all DoFs, shape (n_dofs, d)."""
        if self._support_points is None:
            pts = self.reference_points(self.nodes_1d)
            x, _ = self.mesh.map_points(pts)
            out = np.empty((self.n_dofs, self.dim))
            out[self.cell_to_global.reshape(-1)] = x.reshape(-1, self.dim)
            self._support_points = out
        return self._support_points

    def evaluate(self, u, ref_points_1d):
        """Values of FE functions on a tensor grid of reference points per cell.

        ``u`` has shape ``(..., n_dofs)``; the result has shape
        ``(..., n_cells, n**d)``.
        """
        vals = self.basis_1d.values(ref_points_1d).T
        loc = tensor_apply([vals] * self.dim, self.gather(u))
        return loc.reshape(loc.shape[:-self.dim] + (-1,))


class SpatialOperator:
    """Matrix-free mass or stiffness operator.

    The stiffness operator carries the coefficient ``rho`` inside the
    quadrature.  ``n_applied`` counts single-vector applications.
    """

    def __init__(self, dofmap: SpatialDofMap, kind: str, coefficient: CoefficientField | None = None,
                 n_quad: int | None = None):
        if kind not in ("Mass", "Stiffness"):
            raise ValueError(f"kind must be 'Mass' or 'Stiffness', got {kind!r}")
        self.dofmap = dofmap
        self.kind = kind
        self.coefficient = coefficient if coefficient is not None else constant_coefficient(1.0)
        self.n_quad = n_quad or dofmap.p + 1
        self.n_applied = 0
        geo = dofmap.geometry(self.n_quad)
        q = geo["rule"]
        self._val = dofmap.basis_1d.values(q.points).T  # (nq, n1)
        self._der = dofmap.basis_1d.derivatives(q.points).T
        shape = (dofmap.n_cells,) + (self.n_quad,) * dofmap.dim
        if kind == "Mass":
            self._weights = geo["jxw"].reshape(shape)
        else:
            rho = self.coefficient(geo["x"])
            jinv = geo["jinv"]  # (nc, nq, ref, phys)
            metric = np.einsum("cqip,cqjp->cqij", jinv, jinv)
            metric *= (rho * geo["jxw"])[..., None, None]
            d = dofmap.dim
            self._weights = np.ascontiguousarray(np.moveaxis(metric, (2, 3), (0, 1))).reshape((d, d) + shape)
        self._colloc = None
        self._diag_metric = False
        if kind == "Stiffness":
            if self.n_quad == dofmap.n_1d:
                # derivative at the quadrature points from values there
                self._colloc = np.linalg.solve(self._val.T, self._der.T).T
            off = [self._weights[a, b] for a in range(dofmap.dim) for b in range(dofmap.dim) if a != b]
            self._diag_metric = all(not np.any(w) for w in off)
            self._diag = [np.ascontiguousarray(self._weights[a, a]) for a in range(dofmap.dim)]
        self._dense = None

    @property
    def n_dofs(self):
        return self.dofmap.n_dofs

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.n_dofs:
            raise ValueError(f"vector length {u.shape[-1]} does not match {self.n_dofs} DoFs")
        return u

    def apply_local(self, loc):
        """Cell kernels on local tensors ``(..., n_cells) + (p+1,)*d``."""
        d = self.dofmap.dim
        V, D = self._val, self._der
        if self.kind == "Mass":
            q = tensor_apply([V] * d, loc) * self._weights
            return tensor_apply([V.T] * d, q)
        if self._colloc is not None:
            # interpolate once, then differentiate at the quadrature points
            Dq = self._colloc
            q = tensor_apply([V] * d, loc)
            grads = [contract_axis(Dq, q, -1 - a) for a in range(d)]
            back = 0.0
            for a in range(d):
                flux = self._flux(grads, a)
                back = back + contract_axis(Dq.T, flux, -1 - a)
            return tensor_apply([V.T] * d, back)
        grads = []
        for a in range(d):
            mats = [D if b == a else V for b in range(d)]
            grads.append(tensor_apply(mats, loc))
        out = 0.0
        for a in range(d):
            mats = [D.T if b == a else V.T for b in range(d)]
            out = out + tensor_apply(mats, self._flux(grads, a))
        return out

    def _flux(self, grads, a):
        W = self._weights
        if self._diag_metric:
            return self._diag[a] * grads[a]
        flux = W[a, 0] * grads[0]
        for b in range(1, len(grads)):
            flux += W[a, b] * grads[b]
        return flux

    def apply(self, u):
        """``M_h u`` or ``A_h u`` for one vector or a stack ``(..., n_dofs)``."""
        u = self._check(u)
        self.n_applied += int(np.prod(u.shape[:-1], dtype=int))
        loc = self.dofmap.gather(u)
        return self.dofmap.scatter_add(self.apply_local(loc))

    __call__ = apply

    def element_matrices(self) -> np.ndarray:
        """Dense cell matrices, shape (n_cells, n_local, n_local)."""
        dm = self.dofmap
        eye = np.eye(dm.n_local).reshape((dm.n_local, 1) + (dm.n_1d,) * dm.dim)
        cols = self.apply_local(np.broadcast_to(eye, (dm.n_local, dm.n_cells) + (dm.n_1d,) * dm.dim))
        cols = cols.reshape(dm.n_local, dm.n_cells, dm.n_local)
        return np.transpose(cols, (1, 2, 0))

    def assemble_sparse(self) -> sp.csr_matrix:
        dm = self.dofmap
        ke = self.element_matrices()
        rows = np.repeat(dm.cell_to_global, dm.n_local, axis=1).reshape(-1)
        cols = np.tile(dm.cell_to_global, (1, dm.n_local)).reshape(-1)
        return sp.csr_matrix((ke.reshape(-1), (rows, cols)), shape=(dm.n_dofs, dm.n_dofs))

    def assemble_dense(self) -> np.ndarray:
        """Explicit matrix from applying the operator to every unit vector."""
        if self.n_dofs > DENSE_LIMIT:
            raise SizeLimitError(f"dense assembly limited to {DENSE_LIMIT} DoFs, got {self.n_dofs}")
        if self._dense is None:
            n0 = self.n_applied
            self._dense = self.apply(np.eye(self.n_dofs)).T
            self.n_applied = n0
        return self._dense


def apply_mass(op: SpatialOperator, u):
    if op.kind != "Mass":
        raise ValueError("operator is not a mass operator")
    return op.apply(u)


def apply_stiffness(op: SpatialOperator, u):
    if op.kind != "Stiffness":
        raise ValueError("operator is not a stiffness operator")
    return op.apply(u)


def _can_fuse(mass: SpatialOperator, stiffness: SpatialOperator) -> bool:
    return (mass.kind == "Mass" and stiffness.kind == "Stiffness"
            and mass.dofmap is stiffness.dofmap and mass.n_quad == stiffness.n_quad
            and stiffness._colloc is not None)


def apply_combined(mass: SpatialOperator, stiffness: SpatialOperator, U, coef_mass, coef_stiff):
    """``coef_stiff @ (A_h U) + coef_mass @ (M_h U)`` for a stack ``U`` (n, n_dofs).

    The coefficient matrices (m, n) mix the stacked vectors.  When both
    operators share the quadrature, one gather, one interpolation to the
    quadrature points and one scatter serve both, and the mixing happens at
    the quadrature points.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or U.shape[1] != mass.n_dofs:
        raise ValueError(f"expected a stack of shape (n, {mass.n_dofs}), got {U.shape}")
    if not _can_fuse(mass, stiffness):
        return coef_stiff @ stiffness.apply(U) + coef_mass @ mass.apply(U)
    dm = mass.dofmap
    d = dm.dim
    n = U.shape[0]
    mass.n_applied += n
    stiffness.n_applied += n
    V, Dq = mass._val, stiffness._colloc
    q = tensor_apply([V] * d, dm.gather(U))
    qshape = q.shape
    back = (coef_mass @ (q * mass._weights).reshape(n, -1)).reshape((-1,) + qshape[1:])
    grads = [contract_axis(Dq, q, -1 - a) for a in range(d)]
    for a in range(d):
        flux = stiffness._flux(grads, a).reshape(n, -1)
        flux = (coef_stiff @ flux).reshape(back.shape)
        back += contract_axis(Dq.T, flux, -1 - a)
    return dm.scatter_add(tensor_apply([V.T] * d, back))


def assemble_dense(op: SpatialOperator) -> np.ndarray:
    return op.assemble_dense()


def apply_dirichlet(apply_fn, u, constrained_mask):
    """Symmetric elimination: zero constrained inputs, identity on their rows."""
    u = np.asarray(u, dtype=float)
    v = np.where(constrained_mask, 0.0, u)
    out = apply_fn(v)
    return np.where(constrained_mask, u, out)


def interpolate(dofmap: SpatialDofMap, f) -> np.ndarray:
    """Nodal interpolation of ``f(points)`` at the support points."""
    vals = np.asarray(f(dofmap.support_points()), dtype=float)
    return np.broadcast_to(vals, (dofmap.n_dofs,)).copy()


def l2_project_function(f, dofmap: SpatialDofMap) -> np.ndarray:
    """Discrete initial data; implemented as nodal interpolation."""
    return interpolate(dofmap, f)


def assemble_load(dofmap: SpatialDofMap, func, n_quad: int | None = None) -> np.ndarray:
    """Load vector ``(f, phi_i)`` by Gauss quadrature (``p+2`` points per axis).

    ``func`` maps physical points (n, d) to values (n,).
    """
    n_quad = n_quad or dofmap.p + 2
    geo = dofmap.geometry(n_quad)
    d = dofmap.dim
    vals = np.asarray(func(geo["x"].reshape(-1, d)), dtype=float)
    vals = np.broadcast_to(vals, (geo["x"].shape[0] * geo["x"].shape[1],)).reshape(geo["jxw"].shape)
    q = (vals * geo["jxw"]).reshape((dofmap.n_cells,) + (n_quad,) * d)
    V = dofmap.basis_1d.values(geo["rule"].points)  # (n1, nq)
    return dofmap.scatter_add(tensor_apply([V] * d, q))
