"""Independent dense oracles shared by the test modules."""

import numpy as np
import pytest

from stochbc import fem
from stochbc.mesh import build_structured_mesh


def naive_matrices(mesh):
    """Dense M, K, M_gamma from per-element affine maps and a midpoint rule.

    Basis gradients come from inverting the 3x3 affine system of each
    triangle; mass entries use the edge-midpoint rule, exact for quadratics.
    """
    n = mesh.n_vertices
    M = np.zeros((n, n))
    K = np.zeros((n, n))
    for tri in mesh.triangles:
        p = mesh.vertices[tri]
        A = np.column_stack([np.ones(3), p])
        coef = np.linalg.inv(A)  # column k: coefficients (a, b, c) of basis k
        area = 0.5 * abs(np.linalg.det(A))
        grads = coef[1:, :].T
        mids = 0.5 * (p + np.roll(p, -1, axis=0))
        vals = np.column_stack([np.ones(3), mids]) @ coef  # (3 midpoints, 3 basis)
        for a in range(3):
            for b in range(3):
                m = area / 3.0 * np.sum(vals[:, a] * vals[:, b])
                M[tri[a], tri[b]] += m
                K[tri[a], tri[b]] += area * grads[a] @ grads[b] + m
    nb = mesh.n_boundary
    Mg = np.zeros((nb, nb))
    for k in range(nb):
        v0, v1 = mesh.boundary_edges[k]
        ell = np.linalg.norm(mesh.vertices[v1] - mesh.vertices[v0])
        a, b = k, (k + 1) % nb
        Mg[a, a] += ell / 3
        Mg[b, b] += ell / 3
        Mg[a, b] += ell / 6
        Mg[b, a] += ell / 6
    return M, K, Mg


def dense_S0(ops, J):
    """Matrix of U (J*Nb, flattened step-major) -> Y_0..Y_{J-1} (J*N)."""
    M, K, Mg = ops.M.toarray(), ops.K.toarray(), ops.M_gamma.toarray()
    E = ops.E.toarray()
    A = np.linalg.inv(M + ops.tau * K)
    N, Nb = ops.n, ops.nb
    S = np.zeros((J * N, J * Nb))
    for k in range(J):
        # control on interval k first reaches Y_{k+1}
        blk = ops.tau * A @ E @ Mg
        for j in range(k + 1, J):
            S[j * N:(j + 1) * N, k * Nb:(k + 1) * Nb] = blk
            blk = A @ M @ blk
    return S


@pytest.fixture(scope="session")
def ops_n1():
    return fem.assemble(build_structured_mesh(1), 0.1)


@pytest.fixture(scope="session")
def ops_n2():
    return fem.assemble(build_structured_mesh(2), 0.25)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
