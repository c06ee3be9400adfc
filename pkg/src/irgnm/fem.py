"""P1 finite elements on regular triangulations of the square (-1, 1)^2.

Nodes are numbered row by row, ``index = j * (N + 1) + i`` with
``x = -1 + 2 i / N`` and ``y = -1 + 2 j / N``.  Every cell is split along
its lower-left to upper-right diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Mesh",
    "Field",
    "SparseSystem",
    "RecoveredField",
    "build_mesh",
    "refine",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_weighted_mass",
    "lumped_weights",
    "l2_inner",
    "l2_norm",
    "l1_norm",
    "prolong",
    "restrict_project",
    "quadratic_recovery",
    "evaluate_p1",
    "interpolate",
    "write_field_csv",
    "read_field_csv",
]


@dataclass(frozen=True, eq=False)
class Mesh:
    n_per_side: int
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_mask: np.ndarray
    level: int = 0

    @property
    def h(self) -> float:
        return 2.0 / self.n_per_side

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @cached_property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return assemble_mass(self).matrix

    @cached_property
    def weights(self) -> np.ndarray:
        return lumped_weights(self)

    def grid(self, values: np.ndarray) -> np.ndarray:
        """View nodal values as an ``(N+1, N+1)`` array indexed ``[j, i]``."""
        n = self.n_per_side + 1
        return np.asarray(values).reshape(n, n)

    def __repr__(self) -> str:
        return f"Mesh(N={self.n_per_side}, level={self.level})"


@dataclass(frozen=True, eq=False)
class Field:
    """Nodal P1 coefficients bound to a mesh."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.mesh.n_nodes,):
            raise ValueError(
                f"field has {values.shape} values, mesh has {self.mesh.n_nodes} nodes"
            )
        object.__setattr__(self, "values", values)

    def __add__(self, other):
        return Field(self.mesh, self.values + _values_on(self.mesh, other))

    def __sub__(self, other):
        return Field(self.mesh, self.values - _values_on(self.mesh, other))

    def __mul__(self, scalar: float):
        return Field(self.mesh, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.mesh, -self.values)


def _values_on(mesh: Mesh, other) -> np.ndarray | float:
    if isinstance(other, Field):
        _check_same(mesh, other)
        return other.values
    return other


def _check_same(mesh: Mesh, *fields: Field) -> None:
    for f in fields:
        if f.mesh is not mesh and f.mesh.n_per_side != mesh.n_per_side:
            raise ValueError(f"field lives on {f.mesh!r}, expected {mesh!r}")


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Symmetric sparse operator plus the dofs that carry Dirichlet constraints."""

    matrix: sp.csr_matrix
    constrained_dofs: np.ndarray

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def constrained(self) -> sp.csr_matrix:
        """Matrix with constrained rows and columns replaced by identity rows."""
        keep = np.ones(self.dimension)
        keep[self.constrained_dofs] = 0.0
        d = sp.diags(keep)
        eye = sp.diags(1.0 - keep)
        return (d @ self.matrix @ d + eye).tocsr()


def build_mesh(n_per_side: int, level: int = 0) -> Mesh:
    if n_per_side < 2:
        raise ValueError(f"n_per_side must be >= 2, got {n_per_side}")
    n = int(n_per_side)
    t = np.linspace(-1.0, 1.0, n + 1)
    xx, yy = np.meshgrid(t, t)
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    a = (j * (n + 1) + i).ravel()
    b = a + 1
    c = a + n + 2
    d = a + n + 1
    triangles = np.concatenate(
        [np.column_stack([a, b, c]), np.column_stack([a, c, d])]
    )

    idx = np.arange(n + 1)
    on_edge = (idx == 0) | (idx == n)
    boundary = (on_edge[None, :] | on_edge[:, None]).ravel()
    return Mesh(n, nodes, triangles, boundary, level)


def refine(mesh: Mesh) -> Mesh:
    return build_mesh(2 * mesh.n_per_side, mesh.level + 1)


def _gradients(mesh: Mesh) -> np.ndarray:
    # Barycentric gradients, shape (ntri, 3, 2).
    p = mesh.nodes[mesh.triangles]
    area2 = 2.0 * mesh.areas
    g = np.empty((len(p), 3, 2))
    for k in range(3):
        q1 = p[:, (k + 1) % 3]
        q2 = p[:, (k + 2) % 3]
        g[:, k, 0] = (q1[:, 1] - q2[:, 1]) / area2
        g[:, k, 1] = (q2[:, 0] - q1[:, 0]) / area2
    return g


def _assemble(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_stiffness(mesh: Mesh) -> SparseSystem:
    """Discrete Laplacian ``int grad(phi_i) . grad(phi_j)`` (unconstrained matrix)."""
    g = _gradients(mesh)
    local = np.einsum("tid,tjd->tij", g, g) * mesh.areas[:, None, None]
    return SparseSystem(_assemble(mesh, local), np.flatnonzero(mesh.boundary_mask))


def assemble_mass(mesh: Mesh) -> SparseSystem:
    """Consistent P1 mass matrix (exact for products of P1 functions)."""
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = mesh.areas[:, None, None] * ref[None]
    return SparseSystem(_assemble(mesh, local), np.flatnonzero(mesh.boundary_mask))


def lumped_weights(mesh: Mesh) -> np.ndarray:
    """Vertex quadrature weights: a third of the area of every adjacent triangle."""
    w = np.zeros(mesh.n_nodes)
    np.add.at(w, mesh.triangles.ravel(), np.repeat(mesh.areas / 3.0, 3))
    return w


def assemble_weighted_mass(mesh: Mesh, weight: Field) -> SparseSystem:
    """Vertex-quadrature mass matrix ``diag(w_i * weight_i)``."""
    _check_same(mesh, weight)
    diag = mesh.weights * weight.values
    return SparseSystem(sp.diags(diag).tocsr(), np.flatnonzero(mesh.boundary_mask))


def l2_inner(mesh: Mesh, a: Field, b: Field) -> float:
    """Exact L2(Omega) inner product of two P1 functions."""
    _check_same(mesh, a, b)
    return float(a.values @ (mesh.mass @ b.values))


def l2_norm(mesh: Mesh, a: Field) -> float:
    return float(np.sqrt(max(l2_inner(mesh, a, a), 0.0)))


def l1_norm(mesh: Mesh, s: Field) -> float:
    _check_same(mesh, s)
    return float(mesh.weights @ np.abs(s.values))


def _check_nested(coarse: Mesh, fine: Mesh) -> None:
    if fine.n_per_side != 2 * coarse.n_per_side:
        raise ValueError(f"{fine!r} is not the uniform refinement of {coarse!r}")


def prolong(coarse: Field, fine_mesh: Mesh) -> Field:
    """P1 interpolation of a coarse field onto the once-refined mesh."""
    _check_nested(coarse.mesh, fine_mesh)
    c = coarse.mesh.grid(coarse.values)
    n = fine_mesh.n_per_side
    f = np.empty((n + 1, n + 1))
    f[::2, ::2] = c
    f[::2, 1::2] = 0.5 * (c[:, :-1] + c[:, 1:])
    f[1::2, ::2] = 0.5 * (c[:-1, :] + c[1:, :])
    # new node at the midpoint of the cell diagonal (i, j) -- (i+1, j+1)
    f[1::2, 1::2] = 0.5 * (c[:-1, :-1] + c[1:, 1:])
    return Field(fine_mesh, f.ravel())


def restrict_project(fine: Field, coarse_mesh: Mesh) -> Field:
    """Nodal injection onto the coarse mesh."""
    _check_nested(coarse_mesh, fine.mesh)
    return Field(coarse_mesh, fine.mesh.grid(fine.values)[::2, ::2].ravel())


def _locate(n: int, points: np.ndarray, cell: float):
    # cell index and local coordinates in [0, 1] on a uniform grid over [-1, 1]
    q = (np.asarray(points, dtype=float) + 1.0) / cell
    idx = np.clip(np.floor(q), 0, n - 1).astype(int)
    return idx, q - idx


def evaluate_p1(field: Field, points: np.ndarray) -> np.ndarray:
    """Point values of a P1 field at ``points`` of shape ``(m, 2)``."""
    mesh = field.mesh
    n = mesh.n_per_side
    idx, loc = _locate(n, points, mesh.h)
    g = mesh.grid(field.values)
    i, j = idx[:, 0], idx[:, 1]
    xi, eta = loc[:, 0], loc[:, 1]
    va, vb = g[j, i], g[j, i + 1]
    vc, vd = g[j + 1, i + 1], g[j + 1, i]
    lower = va + xi * (vb - va) + eta * (vc - vb)
    upper = va + xi * (vc - vd) + eta * (vd - va)
    return np.where(xi >= eta, lower, upper)


def interpolate(mesh: Mesh, func) -> Field:
    """Nodal interpolant of ``func(x, y)``."""
    return Field(mesh, np.asarray(func(mesh.nodes[:, 0], mesh.nodes[:, 1]), dtype=float)
                 * np.ones(mesh.n_nodes))


@dataclass(frozen=True, eq=False)
class RecoveredField:
    """Patchwise quadratic reconstruction of a P1 field.

    The reconstruction is the P2 interpolant on the macro triangles of the
    next-coarser mesh (2x2 cells per macro cell).  ``fine`` holds its values
    at the nodes of the once-refined mesh, ``base`` the P1 field it was built
    from prolonged to that mesh, so ``weight`` is ``pi_h z - z`` there.
    """

    source: Field
    fine: Field
    base: Field

    @property
    def weight(self) -> Field:
        return self.fine - self.base

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return _evaluate_p2_macro(self.source, points)


def _evaluate_p2_macro(field: Field, points: np.ndarray) -> np.ndarray:
    mesh = field.mesh
    m = mesh.n_per_side // 2
    idx, loc = _locate(m, points, 2.0 * mesh.h)
    g = mesh.grid(field.values)
    I, J = 2 * idx[:, 0], 2 * idx[:, 1]
    xi, eta = loc[:, 0], loc[:, 1]

    def v(di, dj):
        return g[J + dj, I + di]

    lower = xi >= eta
    # barycentric coordinates on (0,0),(1,0),(1,1) resp. (0,0),(1,1),(0,1)
    l0 = np.where(lower, 1.0 - xi, 1.0 - eta)
    l1 = np.where(lower, xi - eta, xi)
    l2 = np.where(lower, eta, eta - xi)
    n0 = v(0, 0)
    n1 = np.where(lower, v(2, 0), v(2, 2))
    n2 = np.where(lower, v(2, 2), v(0, 2))
    m01 = np.where(lower, v(1, 0), v(1, 1))
    m12 = np.where(lower, v(2, 1), v(1, 2))
    m20 = np.where(lower, v(1, 1), v(0, 1))
    return (
        n0 * l0 * (2 * l0 - 1)
        + n1 * l1 * (2 * l1 - 1)
        + n2 * l2 * (2 * l2 - 1)
        + 4 * (m01 * l0 * l1 + m12 * l1 * l2 + m20 * l2 * l0)
    )


def quadratic_recovery(v: Field) -> RecoveredField:
    mesh = v.mesh
    if mesh.n_per_side % 2:
        raise ValueError("quadratic recovery needs an even number of cells per side")
    fine_mesh = refine(mesh)
    fine = Field(fine_mesh, _evaluate_p2_macro(v, fine_mesh.nodes))
    return RecoveredField(v, fine, prolong(v, fine_mesh))


def write_field_csv(path: str | Path, field: Field) -> None:
    mesh = field.mesh
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# N={mesh.n_per_side} level={mesh.level}\n")
        fh.write("x,y,value\n")
        for (x, y), val in zip(mesh.nodes, field.values):
            fh.write(f"{x:.17g},{y:.17g},{val:.17g}\n")


def read_field_csv(path: str | Path) -> Field:
    path = Path(path)
    with path.open() as fh:
        meta = fh.readline().lstrip("#").split()
        header = fh.readline().strip()
        if header != "x,y,value":
            raise ValueError(f"{path}: unexpected header {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    info = dict(item.split("=") for item in meta)
    mesh = build_mesh(int(info["N"]), int(info.get("level", 0)))
    if data.shape[0] != mesh.n_nodes:
        raise ValueError(f"{path}: {data.shape[0]} rows for N={mesh.n_per_side}")
    return Field(mesh, data[:, 2])
