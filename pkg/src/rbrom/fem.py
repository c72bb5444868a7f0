"""Meshes and linear finite element assembly.

Supports two discretizations: piecewise-linear hat functions on a uniform
interval mesh, and linear triangles on a structured triangulation of the
unit square (each grid square split along the same diagonal). Element
integrals with polynomial integrands use the exact closed forms; the
parameter-dependent weight in the reaction benchmark is integrated with
the three-point mid-edge rule, exact for quadratics.

Dirichlet conditions are imposed by eliminating constrained rows and
columns, so every assembled operator acts on free degrees of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverError
from .linalg import CsrMatrix, csr_matvec

__all__ = [
    "Mesh1D",
    "TriMesh2D",
    "BoundarySpec",
    "dirichlet",
    "natural",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_advection",
    "assemble_weighted_mass",
    "assemble_weighted_load",
    "inverse_distance_weight",
    "interpolate",
    "l2_norm",
]

# Hat function values at the three edge midpoints (rows: midpoints of
# edges 01, 12, 20; columns: vertices).
_PHI_MIDEDGE = np.array([
    [0.5, 0.5, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
])


@dataclass(frozen=True)
class Mesh1D:
    """Uniform mesh of the interval (a, b) with n_el elements."""

    a: float
    b: float
    n_el: int

    def __post_init__(self):
        if self.n_el < 1:
            raise ValueError("Mesh1D: need at least one element")
        if not self.b > self.a:
            raise ValueError("Mesh1D: empty interval")

    @property
    def h(self):
        return (self.b - self.a) / self.n_el

    @property
    def n_nodes(self):
        return self.n_el + 1

    def nodes(self):
        return np.linspace(self.a, self.b, self.n_el + 1)

    def boundary_nodes(self):
        return np.array([0, self.n_el], dtype=np.int64)


@dataclass(frozen=True)
class TriMesh2D:
    """Structured triangulation of the unit square.

    nx-by-nx grid squares, each split along the diagonal from the lower
    left to the upper right corner. Node i sits at
    (i % (nx+1), i // (nx+1)) * h with h = 1/nx.
    """

    nx: int

    def __post_init__(self):
        if self.nx < 1:
            raise ValueError("TriMesh2D: need at least one cell per side")

    @property
    def n_nodes(self):
        return (self.nx + 1) ** 2

    @property
    def n_tri(self):
        return 2 * self.nx * self.nx

    def nodes(self):
        side = np.linspace(0.0, 1.0, self.nx + 1)
        xg, yg = np.meshgrid(side, side, indexing="xy")
        return np.column_stack([xg.ravel(), yg.ravel()])

    def triangles(self):
        nx = self.nx
        ix, iy = np.meshgrid(np.arange(nx), np.arange(nx), indexing="xy")
        n00 = (iy * (nx + 1) + ix).ravel()
        n10 = n00 + 1
        n01 = n00 + nx + 1
        n11 = n01 + 1
        lower = np.column_stack([n00, n10, n11])
        upper = np.column_stack([n00, n11, n01])
        return np.vstack([lower, upper]).astype(np.int64)

    def boundary_nodes(self):
        nx = self.nx
        idx = np.arange((nx + 1) ** 2)
        ix = idx % (nx + 1)
        iy = idx // (nx + 1)
        mask = (ix == 0) | (ix == nx) | (iy == 0) | (iy == nx)
        return idx[mask].astype(np.int64)


@dataclass(frozen=True)
class BoundarySpec:
    """Constraint bookkeeping for a mesh.

    kind is "dirichlet" (homogeneous essential conditions on the listed
    nodes, imposed by elimination) or "neumann" (natural conditions, no
    constrained nodes).
    """

    kind: str
    n_nodes: int
    constrained: np.ndarray

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise ValueError(f"BoundarySpec: unknown kind {self.kind!r}")
        object.__setattr__(
            self, "constrained",
            np.unique(np.asarray(self.constrained, dtype=np.int64)))

    @property
    def free(self):
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.constrained] = False
        return np.flatnonzero(mask)

    @property
    def n_free(self):
        return self.n_nodes - self.constrained.size

    def restrict(self, full):
        """Drop constrained entries from a full nodal vector."""
        return np.asarray(full, dtype=np.float64)[self.free]

    def extend(self, reduced):
        """Re-insert zeros at constrained nodes."""
        out = np.zeros(self.n_nodes)
        out[self.free] = reduced
        return out


def dirichlet(mesh) -> BoundarySpec:
    """Homogeneous Dirichlet conditions on the whole boundary."""
    return BoundarySpec("dirichlet", _n_nodes(mesh), mesh.boundary_nodes())


def natural(mesh) -> BoundarySpec:
    """Natural (homogeneous Neumann) conditions: nothing constrained."""
    return BoundarySpec("neumann", _n_nodes(mesh),
                        np.zeros(0, dtype=np.int64))


def _n_nodes(mesh):
    return mesh.n_nodes


def _restrict_coo(boundary, rows, cols, vals):
    lookup = np.full(boundary.n_nodes, -1, dtype=np.int64)
    lookup[boundary.free] = np.arange(boundary.n_free)
    r = lookup[rows]
    c = lookup[cols]
    keep = (r >= 0) & (c >= 0)
    n = boundary.n_free
    return CsrMatrix.from_coo(n, n, r[keep], c[keep], vals[keep])


def _scatter_local(tri, local):
    """COO triplets for per-element dense blocks `local` (n_el, k, k)."""
    k = tri.shape[1]
    rows = np.repeat(tri, k, axis=1).reshape(-1)
    cols = np.tile(tri, (1, k)).reshape(-1)
    return rows, cols, local.reshape(-1)


def _geometry(mesh: TriMesh2D):
    xy = mesh.nodes()
    tri = mesh.triangles()
    x = xy[tri, 0]
    y = xy[tri, 1]
    b = y[:, [1, 2, 0]] - y[:, [2, 0, 1]]
    c = x[:, [2, 0, 1]] - x[:, [1, 2, 0]]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) \
        - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    if np.any(area2 <= 1e-14):
        bad = int(np.argmax(area2 <= 1e-14))
        raise SolverError(f"degenerate element {bad} (area {area2[bad] / 2:.3e})")
    return tri, x, y, b, c, area2 / 2.0


def assemble_mass(mesh, boundary) -> CsrMatrix:
    """L2 mass matrix over free DOFs."""
    if isinstance(mesh, Mesh1D):
        pattern = mesh.h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
        return _assemble_1d_constant(mesh, boundary, pattern)
    tri, _, _, _, _, area = _geometry(mesh)
    pattern = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])
    local = area[:, None, None] / 12.0 * pattern
    return _restrict_coo(boundary, *_scatter_local(tri, local))


def assemble_stiffness(mesh, boundary, diffusion=1.0) -> CsrMatrix:
    """Diffusion stiffness matrix over free DOFs."""
    if isinstance(mesh, Mesh1D):
        pattern = diffusion / mesh.h * np.array([[1.0, -1.0], [-1.0, 1.0]])
        return _assemble_1d_constant(mesh, boundary, pattern)
    tri, _, _, b, c, area = _geometry(mesh)
    local = diffusion * (np.einsum("ti,tj->tij", b, b)
                         + np.einsum("ti,tj->tij", c, c))
    local /= (4.0 * area)[:, None, None]
    return _restrict_coo(boundary, *_scatter_local(tri, local))


def assemble_advection(mesh, boundary, velocity) -> CsrMatrix:
    """Advection matrix for a constant velocity, over free DOFs.

    1D: velocity is a scalar. 2D: velocity is a pair (vx, vy).
    """
    if isinstance(mesh, Mesh1D):
        v = float(velocity)
        pattern = v * np.array([[-0.5, 0.5], [-0.5, 0.5]])
        return _assemble_1d_constant(mesh, boundary, pattern)
    vx, vy = (float(velocity[0]), float(velocity[1]))
    tri, _, _, b, c, area = _geometry(mesh)
    row = (vx * b + vy * c) / 6.0
    local = np.broadcast_to(row[:, None, :], (tri.shape[0], 3, 3)).copy()
    return _restrict_coo(boundary, *_scatter_local(tri, local))


def _assemble_1d_constant(mesh, boundary, pattern):
    n_el = mesh.n_el
    left = np.arange(n_el, dtype=np.int64)
    elems = np.column_stack([left, left + 1])
    local = np.broadcast_to(pattern, (n_el, 2, 2))
    return _restrict_coo(boundary, *_scatter_local(elems, local))


def inverse_distance_weight(x, y, mu):
    """Reaction weight 1 / sqrt((x - mu_1)^2 + (y - mu_2)^2).

    The singular point (mu_1, mu_2) must lie outside the closed unit
    square; mu is restricted to [-1, -0.01]^2.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (2,):
        raise ValueError("inverse_distance_weight: mu must have two components")
    if not (np.all(mu >= -1.0) and np.all(mu <= -0.01)):
        raise ValueError(
            f"inverse_distance_weight: mu={tuple(mu)} outside [-1, -0.01]^2; "
            "the singular point must stay outside the domain")
    return 1.0 / np.sqrt((x - mu[0]) ** 2 + (y - mu[1]) ** 2)


def assemble_weighted_mass(mesh, boundary, mu) -> CsrMatrix:
    """Mass matrix weighted by the inverse-distance reaction coefficient."""
    return assemble_weighted_mass_fn(
        mesh, boundary, lambda x, y: inverse_distance_weight(x, y, mu))


def assemble_weighted_load(mesh, boundary, mu):
    """Load vector with the inverse-distance weight as the density."""
    return assemble_weighted_load_fn(
        mesh, boundary, lambda x, y: inverse_distance_weight(x, y, mu))


def assemble_weighted_mass_fn(mesh: TriMesh2D, boundary, weight) -> CsrMatrix:
    """Weighted mass matrix for an arbitrary weight(x, y) callable.

    Integrated with the mid-edge rule; exact when weight * phi_i * phi_j
    is quadratic, i.e. for constant weights.
    """
    tri, gq, area = _midedge_quadrature(mesh, weight)
    local = np.einsum("tq,qi,qj->tij", gq, _PHI_MIDEDGE, _PHI_MIDEDGE)
    local *= (area / 3.0)[:, None, None]
    return _restrict_coo(boundary, *_scatter_local(tri, local))


def assemble_weighted_load_fn(mesh: TriMesh2D, boundary, weight):
    """Weighted load vector (free DOFs) for a weight(x, y) callable."""
    tri, gq, area = _midedge_quadrature(mesh, weight)
    local = np.einsum("tq,qi->ti", gq, _PHI_MIDEDGE) * (area / 3.0)[:, None]
    full = np.zeros(mesh.n_nodes)
    np.add.at(full, tri.reshape(-1), local.reshape(-1))
    return boundary.restrict(full)


def _midedge_quadrature(mesh, weight):
    tri, x, y, _, _, area = _geometry(mesh)
    # Quadrature points: midpoints of edges 01, 12, 20 per element.
    qx = 0.5 * (x[:, [0, 1, 2]] + x[:, [1, 2, 0]])
    qy = 0.5 * (y[:, [0, 1, 2]] + y[:, [1, 2, 0]])
    gq = np.asarray(weight(qx, qy), dtype=np.float64)
    if gq.shape != qx.shape:
        gq = np.broadcast_to(gq, qx.shape)
    if not np.all(np.isfinite(gq)):
        raise SolverError("weighted assembly: weight evaluated non-finite")
    return tri, gq, area


def interpolate(mesh, f):
    """Nodal interpolant of a scalar function, over all mesh nodes."""
    if isinstance(mesh, Mesh1D):
        return np.asarray(f(mesh.nodes()), dtype=np.float64)
    xy = mesh.nodes()
    return np.asarray(f(xy[:, 0], xy[:, 1]), dtype=np.float64)


def l2_norm(mass: CsrMatrix, v):
    """Discrete L2 norm sqrt(v . M v)."""
    v = np.asarray(v, dtype=np.float64)
    val = v @ csr_matvec(mass, v)
    return float(np.sqrt(max(val, 0.0)))
