"""P1 finite-element operators and the implicit-Euler step solver.

``K`` is the stiffness-plus-mass matrix, so ``-A_h`` is represented by
``M^{-1} K`` and one implicit-Euler step solves ``(M + tau K) x = rhs``.
Boundary data lives in the boundary P1 trace space, indexed in the order of
``mesh.boundary_vertices``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh

# 4-point Gauss-Legendre on [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)
GAUSS4_NODES = 0.5 * (_GL_X + 1.0)
GAUSS4_WEIGHTS = 0.5 * _GL_W

# 7-point degree-5 rule on triangles (barycentric coordinates, weights sum to 1)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_TRI_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
_TRI_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)

Profile = Callable[[np.ndarray], np.ndarray]


class AssemblyError(RuntimeError):
    """Raised when the step matrix cannot be factorized."""


class DimensionError(ValueError):
    """Raised when an array does not match the mesh or boundary size."""


@dataclass(frozen=True, eq=False)
class DiscreteOperators:
    """Assembled operators for one mesh and one time step ``tau``.

    Attributes
    ----------
    M, K : csc_matrix, shape (N, N)
        Mass and stiffness-plus-mass matrices.
    M_gamma : csc_matrix, shape (Nb, Nb)
        Boundary mass matrix in boundary-DOF ordering.
    E : csr_matrix, shape (N, Nb)
        Embedding of boundary DOFs into vertex DOFs.
    boundary_nodes : ndarray, shape (Nb,)
        Vertex index of each boundary DOF.
    """

    mesh: Mesh
    tau: float
    M: sp.csc_matrix
    K: sp.csc_matrix
    M_gamma: sp.csc_matrix
    E: sp.csr_matrix
    boundary_nodes: np.ndarray
    step_matrix: sp.csc_matrix
    _step_lu: spla.SuperLU
    _mass_lu: spla.SuperLU

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def nb(self) -> int:
        return self.M_gamma.shape[0]

    @property
    def boundary_node_index(self) -> dict:
        return {int(v): k for k, v in enumerate(self.boundary_nodes)}

    def with_tau(self, tau: float) -> "DiscreteOperators":
        """Same mesh operators, refactorized for a different step."""
        return _build(self.mesh, tau, self.M, self.K, self.M_gamma, self.E, self._mass_lu)

    def step_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``(M + tau K) x = rhs`` for ``rhs`` of shape (N,) or (S, N)."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[-1] != self.n or rhs.ndim > 2:
            raise DimensionError(f"rhs has shape {rhs.shape}, expected (..., {self.n})")
        if rhs.ndim == 1:
            return self._step_lu.solve(rhs)
        return self._step_lu.solve(rhs.T).T

    def step(self, y: np.ndarray) -> np.ndarray:
        """Homogeneous step map ``(M + tau K)^{-1} M y``."""
        return self.step_solve(self.mass(y))

    def mass(self, y: np.ndarray) -> np.ndarray:
        """``M y`` along the last axis."""
        return _apply(self.M, y)

    def mass_solve(self, load: np.ndarray) -> np.ndarray:
        load = np.asarray(load, dtype=float)
        if load.ndim == 1:
            return self._mass_lu.solve(load)
        return self._mass_lu.solve(load.T).T

    def mass_norm_sq(self, y: np.ndarray) -> np.ndarray:
        """``y^T M y`` along the last axis."""
        return np.einsum("...i,...i->...", y, self.mass(y))

    def boundary_mass(self, v: np.ndarray) -> np.ndarray:
        return _apply(self.M_gamma, v)

    def boundary_norm_sq(self, v: np.ndarray) -> np.ndarray:
        return np.einsum("...i,...i->...", v, self.boundary_mass(v))

    def dump(self, directory) -> None:
        """Write the operators in Matrix Market format."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("M", "K", "M_gamma"):
            scipy.io.mmwrite(str(out / f"{name}.mtx"), getattr(self, name))


def _apply(A: sp.spmatrix, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        return A @ y
    return (A @ y.reshape(-1, y.shape[-1]).T).T.reshape(y.shape[:-1] + (A.shape[0],))


def _build(mesh, tau, M, K, M_gamma, E, mass_lu) -> DiscreteOperators:
    if not tau > 0:
        raise ValueError(f"time step must be positive, got {tau!r}")
    step_matrix = (M + tau * K).tocsc()
    try:
        lu = spla.splu(step_matrix, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise AssemblyError(f"step matrix factorization failed: {exc}") from exc
    return DiscreteOperators(mesh, float(tau), M, K, M_gamma, E, mesh.boundary_vertices,
                             step_matrix, lu, mass_lu)


def assemble(mesh: Mesh, tau: float) -> DiscreteOperators:
    """Assemble ``M``, ``K``, ``M_gamma`` exactly and factorize ``M + tau K``."""
    p = mesh.vertices[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = mesh.signed_areas()
    if np.any(area <= 0):
        raise AssemblyError("mesh has degenerate or clockwise triangles")

    ke = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4 * area[:, None, None])
    me = area[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_vertices
    M = sp.coo_matrix((me.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    K = sp.coo_matrix(((ke + me).ravel(), (rows, cols)), shape=(n, n)).tocsc()

    nb = mesh.n_boundary
    local = np.column_stack([np.arange(nb), (np.arange(nb) + 1) % nb])
    ell = np.linalg.norm(
        mesh.vertices[mesh.boundary_edges[:, 1]] - mesh.vertices[mesh.boundary_edges[:, 0]], axis=1
    )
    mge = ell[:, None, None] / 6.0 * (np.ones((2, 2)) + np.eye(2))
    M_gamma = sp.coo_matrix(
        (mge.ravel(), (np.repeat(local, 2, axis=1).ravel(), np.tile(local, (1, 2)).ravel())),
        shape=(nb, nb),
    ).tocsc()
    E = sp.csr_matrix((np.ones(nb), (mesh.boundary_vertices, np.arange(nb))), shape=(n, nb))
    mass_lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A")
    return _build(mesh, tau, M, K, M_gamma, E, mass_lu)


def boundary_load(ops: DiscreteOperators, v: Union[np.ndarray, Profile]) -> np.ndarray:
    """Load vector ``b_i = \\int_Gamma v psi_i ds``.

    ``v`` is either boundary nodal values (shape (Nb,) or (S, Nb)), treated as
    a P1 function on the boundary and integrated exactly, or a callable of the
    arclength integrated by 4-point Gauss-Legendre quadrature per edge.
    """
    if callable(v):
        return ops.E @ boundary_profile_moments(ops.mesh, v)
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != ops.nb:
        raise DimensionError(f"boundary field has shape {v.shape}, expected (..., {ops.nb})")
    return _apply(ops.E, _apply(ops.M_gamma, v))


def boundary_profile_moments(mesh: Mesh, f: Profile) -> np.ndarray:
    """``\\int_Gamma f psi_k ds`` for each boundary DOF ``k`` (Gauss-4 per edge)."""
    s0 = mesh.boundary_arclength
    nb = mesh.n_boundary
    s1 = np.append(s0[1:], mesh.perimeter)
    ell = s1 - s0
    sq = s0[:, None] + ell[:, None] * GAUSS4_NODES[None, :]
    fq = np.asarray(f(sq), dtype=float) * GAUSS4_WEIGHTS[None, :] * ell[:, None]
    out = np.zeros(nb)
    np.add.at(out, np.arange(nb), fq @ (1.0 - GAUSS4_NODES))
    np.add.at(out, (np.arange(nb) + 1) % nb, fq @ GAUSS4_NODES)
    return out


def domain_load(ops: DiscreteOperators, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """``\\int_O f psi_i dx`` with a degree-5 triangle rule."""
    mesh = ops.mesh
    p = mesh.vertices[mesh.triangles]
    q = np.einsum("qk,tkd->tqd", _TRI_BARY, p)
    fq = np.asarray(f(q[..., 0], q[..., 1]), dtype=float) * _TRI_W[None, :]
    area = mesh.signed_areas()
    contrib = np.einsum("tq,qk->tk", fq, _TRI_BARY) * area[:, None]
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.triangles.ravel(), contrib.ravel())
    return out


def l2_projection(ops: DiscreteOperators, f) -> np.ndarray:
    """Nodal values of the L2 projection of ``f(x, y)`` onto V_h."""
    return ops.mass_solve(domain_load(ops, f))


def trace(ops: DiscreteOperators, y: np.ndarray) -> np.ndarray:
    """Restriction of nodal fields (last axis) to the boundary DOFs."""
    y = np.asarray(y)
    if y.shape[-1] != ops.n:
        raise DimensionError(f"nodal field has shape {y.shape}, expected (..., {ops.n})")
    return y[..., ops.boundary_nodes]


def inject(ops: DiscreteOperators, v: np.ndarray) -> np.ndarray:
    """Nodal field equal to ``v`` on boundary DOFs and zero inside."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (ops.n,))
    out[..., ops.boundary_nodes] = v
    return out


def step_solve(ops: DiscreteOperators, rhs: np.ndarray) -> np.ndarray:
    return ops.step_solve(rhs)
