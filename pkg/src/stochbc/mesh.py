"""Structured triangulations of the unit square.

Triangles are counterclockwise, and the boundary is a closed counterclockwise
loop starting at the corner (0, 0).  Every mesh built here is nested in the
uniform (red) refinement of itself, which is what the rate studies rely on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Raised for invalid mesh sizes or broken boundary structure."""


@dataclass(frozen=True)
class Mesh:
    """Conforming triangulation with an ordered boundary loop.

    Attributes
    ----------
    vertices : ndarray, shape (N, 2)
    triangles : ndarray, shape (T, 3)
        Vertex indices, counterclockwise.
    boundary_edges : ndarray, shape (Nb, 2)
        Ordered pairs tracing the boundary counterclockwise from (0, 0).
    boundary_vertices : ndarray, shape (Nb,)
        ``boundary_edges[:, 0]``; position ``k`` is boundary DOF ``k``.
    boundary_arclength : ndarray, shape (Nb,)
        Arclength of each boundary vertex, in ``[0, perimeter)``.
    refinement_level : int
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_vertices: np.ndarray
    boundary_arclength: np.ndarray
    refinement_level: int = 0
    perimeter: float = field(default=4.0)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary_vertices.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def diameters(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d = [np.linalg.norm(p[:, a] - p[:, b], axis=1) for a, b in ((0, 1), (1, 2), (2, 0))]
        return np.max(d, axis=0)

    @property
    def h(self) -> float:
        """Maximum element diameter."""
        return float(self.diameters().max())

    def edges(self) -> np.ndarray:
        """All distinct undirected edges, shape (E, 2), sorted pairs."""
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def write_csv(self, directory) -> None:
        """Dump ``vertices.csv``, ``triangles.csv`` and ``boundary.csv``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "vertices.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x", "y"])
            for i, (x, y) in enumerate(self.vertices):
                w.writerow([i, repr(float(x)), repr(float(y))])
        with open(out / "triangles.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "v0", "v1", "v2"])
            for i, tri in enumerate(self.triangles):
                w.writerow([i, *map(int, tri)])
        s = self.boundary_arclength
        s_next = np.roll(s, -1)
        s_next[-1] = self.perimeter
        with open(out / "boundary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "v0", "v1", "s0", "s1"])
            for i, (a, b) in enumerate(self.boundary_edges):
                w.writerow([i, int(a), int(b), repr(float(s[i])), repr(float(s_next[i]))])


def _boundary_loop(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    # Directed edges in triangle order; a boundary edge appears exactly once
    # and, for ccw triangles, already runs ccw along the boundary.
    directed = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    key = np.sort(directed, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    bnd = directed[counts[inv] == 1]
    if bnd.shape[0] == 0:
        raise MeshError("mesh has no boundary edges")
    nxt = {}
    for a, b in bnd:
        if a in nxt:
            raise MeshError("boundary is not a simple loop (vertex with two outgoing edges)")
        nxt[int(a)] = int(b)
    start = int(np.argmin(np.hypot(vertices[:, 0], vertices[:, 1])))
    if start not in nxt:
        raise MeshError("corner (0, 0) is not on the boundary loop")
    loop = [start]
    cur = nxt[start]
    while cur != start:
        if len(loop) > len(nxt) or cur not in nxt:
            raise MeshError("boundary edges do not form a closed loop")
        loop.append(cur)
        cur = nxt[cur]
    if len(loop) != len(nxt):
        raise MeshError("boundary is disconnected: %d of %d edges in the loop through (0, 0)"
                        % (len(loop), len(nxt)))
    loop = np.asarray(loop, dtype=np.int64)
    return np.column_stack([loop, np.roll(loop, -1)])


def boundary_arclength(mesh_or_vertices, boundary_edges=None) -> np.ndarray:
    """Arclength position of each boundary vertex along the loop.

    Accepts either a :class:`Mesh` or ``(vertices, boundary_edges)``.
    The first loop vertex (the corner (0, 0)) has ``s = 0``.
    """
    if isinstance(mesh_or_vertices, Mesh):
        vertices, edges = mesh_or_vertices.vertices, mesh_or_vertices.boundary_edges
    else:
        vertices, edges = mesh_or_vertices, boundary_edges
    edges = np.asarray(edges)
    if edges.size == 0 or edges[-1, 1] != edges[0, 0]:
        raise MeshError("boundary loop is open")
    if np.any(edges[1:, 0] != edges[:-1, 1]):
        raise MeshError("boundary edges are not chained")
    lengths = np.linalg.norm(vertices[edges[:, 1]] - vertices[edges[:, 0]], axis=1)
    return np.concatenate([[0.0], np.cumsum(lengths[:-1])])


def _finish(vertices: np.ndarray, triangles: np.ndarray, level: int) -> Mesh:
    edges = _boundary_loop(vertices, triangles)
    s = boundary_arclength(vertices, edges)
    perimeter = float(np.linalg.norm(vertices[edges[:, 1]] - vertices[edges[:, 0]], axis=1).sum())
    for arr in (vertices, triangles, edges, s):
        arr.setflags(write=False)
    return Mesh(vertices, triangles, edges, edges[:, 0].copy(), s, level, perimeter)


def build_structured_mesh(n: int) -> Mesh:
    """Uniform mesh of (0, 1)^2 with ``n`` squares per side, each cut along (1, 1)."""
    if int(n) != n or n < 1:
        raise MeshError(f"subdivisions per side must be a positive integer, got {n!r}")
    n = int(n)
    g = np.arange(n + 1) / n
    xx, yy = np.meshgrid(g, g)
    vertices = np.column_stack([xx.ravel(), yy.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper
    return _finish(vertices, triangles, 0)


def refine(mesh: Mesh) -> Mesh:
    """Red refinement: split every triangle into four through edge midpoints.

    Parent vertices keep their indices; midpoints are appended.
    """
    edges = mesh.edges()
    nv = mesh.n_vertices
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mid])
    lookup = sp.coo_matrix(
        (np.arange(nv, nv + len(edges)), (edges[:, 0], edges[:, 1])), shape=(nv, nv)
    ).tocsr()
    lookup = lookup + lookup.T

    def midpoint(a, b):
        return np.asarray(lookup[a, b]).ravel()

    t = mesh.triangles
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
    triangles = np.vstack([
        np.column_stack([a, ab, ca]),
        np.column_stack([ab, b, bc]),
        np.column_stack([ca, bc, c]),
        np.column_stack([ab, bc, ca]),
    ]).astype(np.int64)
    return _finish(vertices, triangles, mesh.refinement_level + 1)


def _grid_keys(points: np.ndarray, n: int) -> np.ndarray:
    k = np.rint(points * n).astype(np.int64)
    if np.max(np.abs(k / n - points)) > 1e-9:
        raise MeshError(f"points are not on the {n}x{n} grid")
    return k[:, 1] * (n + 1) + k[:, 0]


def subdivisions(mesh: Mesh) -> int:
    """Squares per side of a structured (or refined structured) mesh."""
    n = int(round(np.sqrt(mesh.n_triangles / 2)))
    if 2 * n * n != mesh.n_triangles:
        raise MeshError("mesh is not a structured square mesh")
    return n


def prolongation(coarse: Mesh, fine: Mesh) -> sp.csr_matrix:
    """P1 interpolation matrix from a coarse structured mesh to nested fine vertices.

    Returns ``P`` with shape (fine.n_vertices, coarse.n_vertices).
    """
    n = subdivisions(coarse)
    order = np.empty((n + 1) ** 2, dtype=np.int64)
    order[_grid_keys(coarse.vertices, n)] = np.arange(coarse.n_vertices)
    x = fine.vertices[:, 0] * n
    y = fine.vertices[:, 1] * n
    i = np.minimum(np.floor(x + 1e-12).astype(np.int64), n - 1)
    j = np.minimum(np.floor(y + 1e-12).astype(np.int64), n - 1)
    xi = np.clip(x - i, 0.0, 1.0)
    eta = np.clip(y - j, 0.0, 1.0)

    def vid(a, b):
        return order[b * (n + 1) + a]

    low = xi >= eta
    rows = np.repeat(np.arange(fine.n_vertices), 3)
    c00, c10, c11, c01 = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
    cols = np.where(low[:, None], np.column_stack([c00, c10, c11]), np.column_stack([c00, c11, c01]))
    w = np.where(
        low[:, None],
        np.column_stack([1 - xi, xi - eta, eta]),
        np.column_stack([1 - eta, xi, eta - xi]),
    )
    P = sp.csr_matrix((w.ravel(), (rows, cols.ravel())), shape=(fine.n_vertices, coarse.n_vertices))
    P.eliminate_zeros()
    return P


def boundary_prolongation(coarse: Mesh, fine: Mesh) -> sp.csr_matrix:
    """Piecewise-linear interpolation of boundary DOFs between nested meshes."""
    P = prolongation(coarse, fine)
    return P[fine.boundary_vertices][:, coarse.boundary_vertices].tocsr()
