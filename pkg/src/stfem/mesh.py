"""Tensor-product meshes of intervals, quadrilaterals and hexahedra.

Vertices and cells are numbered lexicographically with the x index running
fastest.  A :class:`MeshLevel` keeps a reference to the next coarser level,
so the finest level carries its whole refinement hierarchy.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import PerturbationError, SizeLimitError

__all__ = [
    "MeshLevel",
    "CoefficientField",
    "make_cartesian",
    "perturb",
    "coefficient_shm",
    "constant_coefficient",
    "randomize_coefficient",
]

MAX_CELLS = 1 << 24


def _child_offsets(dim):
    # lexicographic, x fastest
    return np.array([c[::-1] for c in itertools.product((0, 1), repeat=dim)], dtype=int)


@dataclass(eq=False)
class MeshLevel:
    """One level of a nested tensor-product mesh hierarchy.

    Attributes
    ----------
    vertices : ndarray, shape (n_vertices, dim)
    cell_to_vertex : ndarray, shape (n_cells, 2**dim)
        Corner vertices per cell in lexicographic corner order.
    child_to_parent : ndarray or None
        Index of the parent cell on ``parent`` for every cell.
    child_offset : ndarray or None, shape (n_cells, dim)
        Position (0 or 1 per axis) of a cell inside its parent.
    """

    dim: int
    lower: np.ndarray
    upper: np.ndarray
    cells_per_axis: tuple
    vertices: np.ndarray
    cell_to_vertex: np.ndarray
    level: int = 0
    parent: Optional["MeshLevel"] = field(default=None, repr=False)
    child_to_parent: Optional[np.ndarray] = field(default=None, repr=False)
    child_offset: Optional[np.ndarray] = field(default=None, repr=False)
    perturbed: bool = False

    @property
    def n_cells(self) -> int:
        return len(self.cell_to_vertex)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def vertices_per_axis(self):
        return tuple(n + 1 for n in self.cells_per_axis)

    @property
    def cell_index(self) -> np.ndarray:
        """Per-axis integer index of every cell, shape (n_cells, dim)."""
        idx = np.indices(self.cells_per_axis[::-1]).reshape(self.dim, -1)[::-1]
        return idx.T

    def hierarchy(self) -> list:
        """All levels from the coarsest to this one."""
        levels = []
        lvl = self
        while lvl is not None:
            levels.append(lvl)
            lvl = lvl.parent
        return levels[::-1]

    def boundary_vertex_mask(self) -> np.ndarray:
        """Boolean mask, shape (n_vertices, dim): vertex lies on the lower or
        upper boundary plane of that axis."""
        nv = self.vertices_per_axis
        idx = np.indices(nv[::-1]).reshape(self.dim, -1)[::-1].T
        return (idx == 0) | (idx == np.array(nv) - 1)

    def edge_lengths(self):
        """Minimal length of the edges adjacent to each vertex."""
        nv = self.vertices_per_axis
        X = self.vertices.reshape(*nv[::-1], self.dim)
        hmin = np.full(nv[::-1], np.inf)
        for ax in range(self.dim):
            axis = self.dim - 1 - ax  # array axis of coordinate direction ax
            d = np.linalg.norm(np.diff(X, axis=axis), axis=-1)
            lo = [slice(None)] * self.dim
            hi = [slice(None)] * self.dim
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            hmin[tuple(lo)] = np.minimum(hmin[tuple(lo)], d)
            hmin[tuple(hi)] = np.minimum(hmin[tuple(hi)], d)
        return hmin.reshape(-1)

    def cell_sizes(self) -> np.ndarray:
        """Longest edge per cell."""
        corners = self.vertices[self.cell_to_vertex]
        offs = _child_offsets(self.dim)
        longest = np.zeros(self.n_cells)
        for a, b in itertools.combinations(range(len(offs)), 2):
            if np.abs(offs[a] - offs[b]).sum() == 1:
                longest = np.maximum(longest, np.linalg.norm(corners[:, a] - corners[:, b], axis=-1))
        return longest

    def map_points(self, ref_points) -> tuple:
        """Multilinear cell map at reference points.

        Parameters
        ----------
        ref_points : ndarray, shape (nq, dim)

        Returns
        -------
        x : ndarray, shape (n_cells, nq, dim)
        jac : ndarray, shape (n_cells, nq, dim, dim)
            ``jac[..., i, j] = dx_i / dxi_j``.
        """
        ref_points = np.atleast_2d(ref_points)
        offs = _child_offsets(self.dim)
        nq = len(ref_points)
        shape = np.ones((len(offs), nq))
        grads = np.ones((len(offs), nq, self.dim))
        for c, o in enumerate(offs):
            for a in range(self.dim):
                phi = ref_points[:, a] if o[a] else 1.0 - ref_points[:, a]
                dphi = 1.0 if o[a] else -1.0
                shape[c] *= phi
                for b in range(self.dim):
                    grads[c, :, b] *= dphi if a == b else phi
        corners = self.vertices[self.cell_to_vertex]  # (nc, 2^d, d)
        x = np.einsum("cvi,vq->cqi", corners, shape)
        jac = np.einsum("cvi,vqj->cqij", corners, grads)
        return x, jac

    def jacobian_determinants(self, n_points=3) -> np.ndarray:
        from .time_basis import gauss

        g = gauss(n_points).points
        pts = np.array(list(itertools.product(g, repeat=self.dim)))
        _, jac = self.map_points(pts)
        return np.linalg.det(jac)

    def locate(self, point, tol=1e-12):
        """Cell index and reference coordinates of ``point``.

        Raises ``ValueError`` when the point is outside the domain.
        """
        p = np.asarray(point, dtype=float)
        if p.shape != (self.dim,):
            raise ValueError(f"point must have {self.dim} coordinates")
        if np.any(p < self.lower - tol) or np.any(p > self.upper + tol):
            raise ValueError(f"point {p.tolist()} lies outside the domain")
        h = (self.upper - self.lower) / np.array(self.cells_per_axis)
        guess = np.clip(((p - self.lower) // h).astype(int), 0, np.array(self.cells_per_axis) - 1)
        candidates = [guess]
        if self.perturbed:
            for off in itertools.product((-1, 0, 1), repeat=self.dim):
                c = guess + np.array(off)
                if np.all(c >= 0) and np.all(c < np.array(self.cells_per_axis)):
                    candidates.append(c)
        strides = np.cumprod((1,) + tuple(self.cells_per_axis[:-1]))
        for c in candidates:
            cell = int(c @ strides)
            xi = self._invert_map(cell, p)
            if xi is not None and np.all(xi >= -1e-10) and np.all(xi <= 1 + 1e-10):
                return cell, np.clip(xi, 0.0, 1.0)
        raise ValueError(f"could not locate point {p.tolist()}")

    def _invert_map(self, cell, p):
        xi = np.full(self.dim, 0.5)
        sub = MeshLevel(self.dim, self.lower, self.upper, (1,) * self.dim, self.vertices,
                        self.cell_to_vertex[cell:cell + 1])
        for _ in range(50):
            x, jac = sub.map_points(xi[None, :])
            r = x[0, 0] - p
            step = np.linalg.solve(jac[0, 0], r)
            xi = xi - step
            if np.linalg.norm(step) < 1e-14:
                return xi
        return xi if np.linalg.norm(r) < 1e-10 else None

    def summary(self) -> dict:
        sizes = self.cell_sizes()
        return {
            "level": self.level,
            "dim": self.dim,
            "cells_per_axis": list(self.cells_per_axis),
            "n_cells": self.n_cells,
            "n_vertices": self.n_vertices,
            "h_min": float(sizes.min()),
            "h_max": float(sizes.max()),
            "perturbed": self.perturbed,
        }


def _cartesian_level(dim, lower, upper, cells, level):
    nv = [n + 1 for n in cells]
    axes = [lower[a] + (upper[a] - lower[a]) * np.arange(nv[a]) / cells[a] for a in range(dim)]
    # exact i*h on the unit interval without accumulated round-off
    grids = np.meshgrid(*axes[::-1], indexing="ij")
    vertices = np.stack([g.reshape(-1) for g in grids[::-1]], axis=-1)
    cidx = np.indices(cells[::-1]).reshape(dim, -1)[::-1].T  # (nc, d)
    vstride = np.cumprod([1] + nv[:-1])
    c2v = np.stack([(cidx + o) @ vstride for o in _child_offsets(dim)], axis=1)
    return MeshLevel(dim, np.asarray(lower, float), np.asarray(upper, float), tuple(cells),
                     vertices, c2v, level)


def make_cartesian(dim: int, extent=None, refinements: int = 0, base_cells_per_axis=1) -> MeshLevel:
    """Uniformly refined box mesh; returns the finest level.

    ``extent`` is ``(lower, upper)`` with scalars or per-axis sequences and
    defaults to the unit box.
    """
    if dim not in (1, 2, 3):
        raise ValueError(f"dim must be 1, 2 or 3, got {dim}")
    if refinements < 0:
        raise ValueError("refinements must be >= 0")
    if extent is None:
        extent = (0.0, 1.0)
    lower = np.broadcast_to(np.asarray(extent[0], float), (dim,)).copy()
    upper = np.broadcast_to(np.asarray(extent[1], float), (dim,)).copy()
    if np.any(upper <= lower):
        raise ValueError("extent must be non-empty along every axis")
    base = np.broadcast_to(np.asarray(base_cells_per_axis, int), (dim,))
    if np.any(base < 1):
        raise ValueError("base_cells_per_axis must be positive")
    finest = base.astype(np.int64) * (1 << refinements)
    if np.prod(finest.astype(float)) > MAX_CELLS:
        raise SizeLimitError(f"{int(np.prod(finest.astype(float)))} cells exceed the limit {MAX_CELLS}")

    level = _cartesian_level(dim, lower, upper, [int(b) for b in base], 0)
    for r in range(1, refinements + 1):
        cells = [int(b) << r for b in base]
        fine = _cartesian_level(dim, lower, upper, cells, r)
        fidx = fine.cell_index
        pstride = np.cumprod((1,) + level.cells_per_axis[:-1])
        fine.parent = level
        fine.child_to_parent = (fidx // 2) @ pstride
        fine.child_offset = fidx % 2
        level = fine
    return level


def _inherit_vertices(fine: MeshLevel, coarse: MeshLevel) -> np.ndarray:
    nvf = fine.vertices_per_axis
    nvc = coarse.vertices_per_axis
    X = fine.vertices.reshape(*nvf[::-1], fine.dim)
    sl = tuple(slice(None, None, 2) for _ in range(fine.dim))
    Xc = X[sl]
    assert Xc.shape[:-1] == tuple(nvc[::-1])
    return Xc.reshape(-1, fine.dim).copy()


def _rebuild_with_vertices(finest: MeshLevel, vertices: np.ndarray, perturbed: bool) -> MeshLevel:
    levels = finest.hierarchy()
    new = []
    verts = vertices
    for lvl in reversed(levels):
        new.append(MeshLevel(lvl.dim, lvl.lower, lvl.upper, lvl.cells_per_axis, verts,
                             lvl.cell_to_vertex, lvl.level, None, lvl.child_to_parent,
                             lvl.child_offset, perturbed))
        if lvl.parent is not None:
            verts = _inherit_vertices(new[-1], lvl.parent)
    new = new[::-1]
    for a, b in zip(new[:-1], new[1:]):
        b.parent = a
    return new[-1]


def perturb(mesh: MeshLevel, magnitude: float, seed: int = 0, bit_generator: str = "PCG64") -> MeshLevel:
    """Randomly displace the vertices of the finest level.

    Every vertex moves by ``magnitude`` times the minimal length of its
    adjacent edges in a uniformly random direction.  Components normal to a
    boundary plane are dropped, so the domain is preserved and corners stay
    fixed.  Coarser levels take the displaced positions of the fine vertices
    they coincide with.
    """
    if not 0.0 <= magnitude < 0.5:
        raise ValueError(f"perturbation magnitude must be in [0, 0.5), got {magnitude}")
    if magnitude == 0.0:
        return mesh
    rng = np.random.Generator(getattr(np.random, bit_generator)(seed))
    direction = rng.standard_normal((mesh.n_vertices, mesh.dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    shift = magnitude * mesh.edge_lengths()[:, None] * direction
    shift[mesh.boundary_vertex_mask()] = 0.0
    new = _rebuild_with_vertices(mesh, mesh.vertices + shift, True)
    for lvl in new.hierarchy():
        if np.any(lvl.jacobian_determinants() <= 0.0):
            raise PerturbationError(f"perturbation with seed {seed} inverted a cell on level {lvl.level}")
    return new


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Strictly positive scalar field used as diffusivity or squared wave speed.

    ``multipliers`` (optional) scale the base field per cell of a coarse
    Cartesian grid given by ``grid = (lower, upper, cells_per_axis)``.
    """

    kind: str
    value: float = 1.0
    function: Optional[Callable] = field(default=None, repr=False)
    grid: Optional[tuple] = field(default=None, repr=False)
    multipliers: Optional[np.ndarray] = field(default=None, repr=False)
    name: str = "constant"

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if self.function is not None:
            base = np.asarray(self.function(points), dtype=float)
            base = np.broadcast_to(base, points.shape[:-1])
        else:
            base = np.full(points.shape[:-1], self.value)
        if self.multipliers is None:
            return np.array(base)
        lower, upper, cells = self.grid
        cells = np.asarray(cells)
        h = (np.asarray(upper) - np.asarray(lower)) / cells
        idx = np.clip(np.floor((points - lower) / h).astype(int), 0, cells - 1)
        strides = np.cumprod(np.concatenate([[1], cells[:-1]]))
        return base * self.multipliers[idx @ strides]

    @property
    def is_constant(self) -> bool:
        return self.function is None and self.multipliers is None


def constant_coefficient(value: float = 1.0) -> CoefficientField:
    if value <= 0:
        raise ValueError("coefficient must be strictly positive")
    return CoefficientField("Constant", float(value), name=f"constant({value})")


def coefficient_shm(dim: int = 3) -> CoefficientField:
    """Layered coefficient: 1 below y = 0.2; above it 9 (z < 0.2) or 16.

    In 2D the z-clause is dropped (9 for y >= 0.2).
    """
    if dim not in (2, 3):
        raise ValueError("the layered coefficient needs dim 2 or 3")

    def rho(x):
        y = x[..., 1]
        upper_value = 9.0 if dim == 2 else np.where(x[..., 2] < 0.2, 9.0, 16.0)
        return np.where(y < 0.2, 1.0, upper_value)

    return CoefficientField("Callable", function=rho, name=f"shm{dim}d")


def randomize_coefficient(field_: CoefficientField, lo: float, hi: float, seed: int,
                          coarse_mesh: MeshLevel, bit_generator: str = "PCG64") -> CoefficientField:
    """Scale ``field_`` by ``c ~ U[lo, hi]`` drawn once per coarse mesh cell."""
    if not 0.0 < lo <= hi:
        raise ValueError("need 0 < lo <= hi")
    if field_.multipliers is not None:
        raise ValueError("field is already randomized")
    rng = np.random.Generator(getattr(np.random, bit_generator)(seed))
    mult = rng.uniform(lo, hi, size=coarse_mesh.n_cells) if lo < hi else np.full(coarse_mesh.n_cells, lo)
    grid = (coarse_mesh.lower.copy(), coarse_mesh.upper.copy(), tuple(coarse_mesh.cells_per_axis))
    return CoefficientField("PiecewiseByCoarseCell", field_.value, field_.function, grid, mult,
                            name=f"{field_.name}*U[{lo},{hi}]")
