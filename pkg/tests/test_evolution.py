import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochbc import fem
from stochbc.condexp import TreeCE
from stochbc.evolution import (ControlProcess, FeasibilityError, Trajectory, apply_Ptau, backward_S1,
                               cond_exp_G, duality_gap, duality_sides, forward_G, forward_S0, iter_G)
from stochbc.mesh import build_structured_mesh
from stochbc.noise import NoiseEnsemble, NoiseSpec, build_tree, mode_loads, sample_ensemble

from conftest import naive_matrices


def _ops(n, tau):
    return fem.assemble(build_structured_mesh(n), tau)


def test_zero_control_zero_state():
    ops = _ops(2, 0.1)
    Y = forward_S0(ops, np.zeros((5, ops.nb))).values
    assert Y.shape == (6, 1, ops.n)
    np.testing.assert_array_equal(Y, 0.0)


def test_single_step_dense_oracle():
    ops = _ops(1, 0.5)
    M, K, Mg = naive_matrices(ops.mesh)
    b = np.zeros(4)
    b[ops.boundary_nodes] = Mg @ np.ones(4)
    Y1 = np.linalg.solve(M + 0.5 * K, 0.5 * b)
    Y = forward_S0(ops, np.ones((1, ops.nb))).values
    np.testing.assert_array_equal(Y[0], 0.0)
    np.testing.assert_allclose(Y[1, 0], Y1, atol=1e-14)


def test_state_stability_constant_is_mesh_independent():
    ratios = []
    for n in (2, 4, 8, 16):
        ops = _ops(n, 1 / 16)
        s = ops.mesh.boundary_arclength
        U = np.stack([np.cos(np.pi * s / 2) * (1 + j) for j in range(16)])
        Y = forward_S0(ops, U).values
        unorm = np.sqrt(ops.tau * ops.boundary_norm_sq(U).sum())
        ratios.append(np.sqrt(ops.mass_norm_sq(Y).max()) / unorm)
    ratios = np.array(ratios)
    assert ratios.max() / ratios.min() < 1.1


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_forward_linearity(a, b, seed):
    ops = _ops(2, 0.2)
    rng = np.random.default_rng(seed)
    U1, U2 = rng.standard_normal((2, 5, 3, ops.nb))
    lhs = forward_S0(ops, a * U1 + b * U2).values
    rhs = a * forward_S0(ops, U1).values + b * forward_S0(ops, U2).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + abs(a) + abs(b)))


def test_homogeneous_step_contracts():
    ops = _ops(4, 0.05)
    rng = np.random.default_rng(0)
    for _ in range(100):
        y = rng.standard_normal(ops.n)
        assert ops.mass_norm_sq(ops.step(y)) < ops.mass_norm_sq(y)


def test_noise_zero_cases():
    ops = _ops(2, 0.1)
    spec = NoiseSpec(n_modes=3)
    ens = NoiseEnsemble(np.zeros((4, 5, 3)), 0.1)
    np.testing.assert_array_equal(forward_G(ops, spec, ens).values, 0.0)
    ens = sample_ensemble(spec, 5, 0.1, 4, seed=1)
    np.testing.assert_array_equal(forward_G(ops, NoiseSpec(n_modes=3, mu=0.0), ens).values, 0.0)


def _ito_variance(ops, spec, J, tau, step_index):
    """E ||G_j||_M^2 from deterministic per-mode propagation of the mode loads."""
    b = mode_loads(ops, spec)
    coef = spec.coefficients(J, tau)
    total = 0.0
    for n in range(spec.n_modes):
        phi = ops.step_solve(b[n])
        for k in range(step_index - 1, -1, -1):
            total += tau * coef[k, n] ** 2 * ops.mass_norm_sq(phi)
            phi = ops.step(phi)
    return total


def test_noise_mean_zero_within_3sigma():
    ops = _ops(3, 0.1)
    spec = NoiseSpec(n_modes=4)
    ens = sample_ensemble(spec, 6, 0.1, 4000, seed=21)
    G = forward_G(ops, spec, ens).values
    probe = np.ones(ops.n) @ ops.M  # integral functional
    for j in range(1, 7):
        x = G[j] @ probe
        assert abs(x.mean()) <= 3 * x.std() / np.sqrt(x.size)


def test_noise_second_moment_matches_ito_sum():
    ops = _ops(2, 0.125)
    spec = NoiseSpec(n_modes=4, profile=lambda t: 1 + t)
    J = 8
    ens = sample_ensemble(spec, J, 0.125, 10_000, seed=5)
    G = forward_G(ops, spec, ens).values
    x = ops.mass_norm_sq(G[J])
    exact = _ito_variance(ops, spec, J, 0.125, J)
    assert abs(x.mean() - exact) <= 3 * x.std() / np.sqrt(x.size)


def test_iter_G_checks_and_matches_forward():
    ops = _ops(2, 0.1)
    spec = NoiseSpec(n_modes=2)
    ens = sample_ensemble(spec, 3, 0.1, 5, seed=0)
    np.testing.assert_array_equal(np.stack(list(iter_G(ops, spec, ens))), forward_G(ops, spec, ens).values)
    with pytest.raises(fem.DimensionError):
        next(iter_G(ops.with_tau(0.2), spec, ens))
    with pytest.raises(fem.DimensionError):
        next(iter_G(ops, NoiseSpec(n_modes=3), ens))


def test_backward_zero_and_terminal():
    ops = _ops(2, 0.1)
    q = np.zeros((4, ops.n))
    np.testing.assert_array_equal(backward_S1(ops, q).values, 0.0)
    q = np.random.default_rng(0).standard_normal((4, 2, ops.n))
    P = backward_S1(ops, q).values
    np.testing.assert_array_equal(P[-1], 0.0)


def test_backward_last_interval_dense_oracle():
    ops = _ops(1, 0.2)
    M, K, _ = naive_matrices(ops.mesh)
    A = M + 0.2 * K
    q = np.zeros((3, ops.n))
    q[2] = [1.0, -2.0, 0.5, 3.0]
    # dense space-time solve of the backward recursion as one block system
    N, J = ops.n, 3
    big = np.zeros((J * N, J * N))
    rhs = np.zeros(J * N)
    for j in range(J):
        big[j * N:(j + 1) * N, j * N:(j + 1) * N] = A
        if j + 1 < J:
            big[j * N:(j + 1) * N, (j + 1) * N:(j + 2) * N] = -M
        rhs[j * N:(j + 1) * N] = 0.2 * M @ q[j]
    oracle = np.linalg.solve(big, rhs).reshape(J, N)
    P = backward_S1(ops, q).values[:, 0]
    np.testing.assert_allclose(P[:J], oracle, atol=1e-13)
    np.testing.assert_allclose(P[2], np.linalg.solve(A, 0.2 * M @ q[2]), atol=1e-14)


@pytest.mark.parametrize("n, J", [(1, 1), (2, 4), (4, 16)])
def test_duality_identity(n, J):
    ops = _ops(n, 1.0 / J)
    rng = np.random.default_rng(n * 100 + J)
    f = rng.standard_normal((J, 3, ops.nb))
    g = rng.standard_normal((J, 3, ops.n))
    lhs, rhs = duality_sides(ops, f, g)
    assert abs(lhs - rhs) <= 1e-10 * (abs(lhs) + abs(rhs) + 1)
    # scaling f scales both sides, relative gap unchanged
    l10, r10 = duality_sides(ops, 10 * f, g)
    assert l10 == pytest.approx(10 * lhs, rel=1e-12) and r10 == pytest.approx(10 * rhs, rel=1e-12)


def test_duality_zero_pairs():
    ops = _ops(2, 0.25)
    g = np.ones((4, ops.n))
    assert duality_gap(ops, np.zeros((4, ops.nb)), g) == 0.0
    assert duality_gap(ops, np.ones((4, ops.nb)), np.zeros((4, ops.n))) == 0.0


def test_duality_roles_swapped_via_dense_adjoint():
    # the backward map is the M/M_gamma adjoint of the forward map: recompute the
    # right side with S1 applied first and S0 second, pairing the other way round
    ops = _ops(2, 0.25)
    rng = np.random.default_rng(4)
    f = rng.standard_normal((4, ops.nb))
    g = rng.standard_normal((4, ops.n))
    P = backward_S1(ops, g).values[:, 0]
    Y = forward_S0(ops, f).values[:, 0]
    swapped = sum(ops.tau * fem.trace(ops, P[j + 1]) @ ops.M_gamma @ f[j] for j in range(4))
    direct = sum(ops.tau * Y[j] @ ops.M @ g[j] for j in range(4))
    assert swapped == pytest.approx(direct, rel=1e-12)
    assert duality_gap(ops, f, g) <= 1e-12


def test_cond_exp_G_tree_oracle():
    spec = NoiseSpec(n_modes=1)
    J, tau = 4, 0.25
    tree = build_tree(spec, J, tau)
    tens = tree.as_ensemble()
    ops = _ops(2, tau)
    G = forward_G(ops, spec, tens).values
    ce = TreeCE(tens)
    np.testing.assert_array_equal(cond_exp_G(ops, G[2], 0), G[2])
    for j in range(J + 1):
        for k in range(j, J + 1):
            np.testing.assert_allclose(ce.condition(j, G[k]), cond_exp_G(ops, G[j], k - j), atol=1e-12)


def test_cond_exp_G_prefix_mc():
    spec = NoiseSpec(n_modes=2)
    ops = _ops(2, 0.1)
    J, j, S = 5, 2, 20_000
    ens = sample_ensemble(spec, J, 0.1, S, seed=13)
    inc = ens.increments.copy()
    inc[:, :j] = inc[0, :j]  # every path shares the first sample's prefix
    shared = NoiseEnsemble(inc, 0.1)
    G = forward_G(ops, spec, shared).values
    target = cond_exp_G(ops, G[j, 0], J - j)
    probe = np.ones(ops.n) @ ops.M
    x = G[J] @ probe
    assert abs(x.mean() - target @ probe) <= 3 * x.std() / np.sqrt(S)


def test_apply_Ptau():
    tree = build_tree(NoiseSpec(n_modes=1), 3, 1 / 3)
    tens = tree.as_ensemble()
    ce = TreeCE(tens)
    rng = np.random.default_rng(0)
    # deterministic data: interval averages of sub-steps
    det = np.broadcast_to(rng.standard_normal((3, 4, 1, 2)), (3, 4, 8, 2))
    np.testing.assert_allclose(apply_Ptau(det, ce, substeps=True), np.broadcast_to(det.mean(axis=1), (3, 8, 2)),
                               atol=1e-15)
    # adapted piecewise-constant data is a fixed point
    adapted = np.stack([rng.standard_normal((2**j, 2)).repeat(8 // 2**j, axis=0) for j in range(3)])
    np.testing.assert_allclose(apply_Ptau(adapted, ce), adapted, atol=1e-15)
    raw = rng.standard_normal((3, 4, 8, 2))
    once = apply_Ptau(raw, ce, substeps=True)
    np.testing.assert_allclose(apply_Ptau(once, ce), once, atol=1e-12)


def test_tree_adaptedness_of_forward_noise():
    spec = NoiseSpec(n_modes=1)
    tree = build_tree(spec, 3, 0.2)
    tens = tree.as_ensemble()
    ops = _ops(1, 0.2)
    G = forward_G(ops, spec, tens).values
    for j in range(4):
        blocks = G[j].reshape(2**j, -1, ops.n)
        assert np.all(blocks == blocks[:, :1])
    # the adjoint of adapted loads at step j depends on the future, only its conditional mean is adapted
    P = backward_S1(ops, G[:-1]).values
    assert not np.allclose(P[1].reshape(2, 4, -1), P[1].reshape(2, 4, -1)[:, :1])


def test_control_process_bounds_and_csv(tmp_path):
    with pytest.raises(FeasibilityError):
        ControlProcess(np.full((2, 1, 4), 2.0), -1, 1, 0.5)
    with pytest.raises(FeasibilityError):
        ControlProcess(np.zeros((2, 1, 4)), 1, 0, 0.5)
    tr = Trajectory(np.arange(12.0).reshape(3, 1, 4), 0.5)
    tr.write_csv(tmp_path)
    lines = (tmp_path / "traj_0.csv").read_text().splitlines()
    assert lines[0] == "step,vertex,value" and lines[1] == "0,0,0.0" and len(lines) == 13
