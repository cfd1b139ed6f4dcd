"""Boundary Q-Wiener noise: Fourier eigenbasis, increment ensembles, scenario trees."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtri

from .fem import GAUSS4_NODES, GAUSS4_WEIGHTS, DiscreteOperators, boundary_profile_moments

# Stream layout stride: the draw for (step j, mode n) sits at j * _MODE_STRIDE + n,
# so a value never depends on J or on the truncation level.
_MODE_STRIDE = 64
DEFAULT_TREE_BUDGET = 10**6


class TreeBudgetError(ValueError):
    """Raised when a scenario tree would exceed its leaf budget."""


@dataclass(frozen=True)
class NoiseSpec:
    """Diagonal noise model ``sigma(t) phi_n = s(t) mu_n phi_n``.

    ``lambda_n = (1 + n) ** -lambda_exponent``.  ``mu`` is a scalar or one
    value per mode; ``profile`` is the scalar time factor ``s(t)`` (None
    means ``s = 1``).
    """

    n_modes: int = 8
    lambda_exponent: float = 2.0
    mu: float | tuple = 1.0
    profile: Optional[Callable[[np.ndarray], np.ndarray]] = None
    perimeter: float = 4.0

    def __post_init__(self):
        if not 1 <= self.n_modes <= _MODE_STRIDE:
            raise ValueError(f"n_modes must be in [1, {_MODE_STRIDE}], got {self.n_modes}")
        if not np.all(np.isfinite(self.lambdas)) or np.any(self.lambdas <= 0):
            raise ValueError("covariance weights must be finite and strictly positive")

    @property
    def lambdas(self) -> np.ndarray:
        return (1.0 + np.arange(self.n_modes)) ** (-float(self.lambda_exponent))

    @property
    def mus(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.mu, dtype=float), (self.n_modes,)).copy()

    @property
    def is_silent(self) -> bool:
        return not np.any(self.mus)

    def step_scale(self, j: int, tau: float) -> float:
        """Root-mean-square of ``s`` over ``[t_j, t_{j+1})``."""
        if self.profile is None:
            return 1.0
        t = (j + GAUSS4_NODES) * tau
        return float(np.sqrt(np.sum(GAUSS4_WEIGHTS * np.asarray(self.profile(t), dtype=float) ** 2)))

    def coefficients(self, J: int, tau: float) -> np.ndarray:
        """``sqrt(lambda_n) mu_n sbar_j`` as an array of shape (J, n_modes)."""
        s = np.array([self.step_scale(j, tau) for j in range(J)])
        return s[:, None] * (np.sqrt(self.lambdas) * self.mus)[None, :]


def fourier_mode(spec: NoiseSpec, n: int, s) -> np.ndarray:
    """Real Fourier basis function ``phi_n`` of the boundary arclength ``s``."""
    L = spec.perimeter
    s = np.asarray(s, dtype=float)
    if n == 0:
        return np.full_like(s, 1.0 / np.sqrt(L))
    m = (n + 1) // 2
    arg = 2.0 * np.pi * m * s / L
    return np.sqrt(2.0 / L) * (np.cos(arg) if n % 2 == 1 else np.sin(arg))


def mode_loads(ops: DiscreteOperators, spec: NoiseSpec) -> np.ndarray:
    """Load vectors ``b(phi_n)``, shape (n_modes, N)."""
    out = np.zeros((spec.n_modes, ops.n))
    for n in range(spec.n_modes):
        out[n] = ops.E @ boundary_profile_moments(ops.mesh, lambda s, n=n: fourier_mode(spec, n, s))
    return out


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    """Brownian increments ``increments[sample, j, mode]``.

    ``weights`` are sample probabilities (None means uniform); scenario trees
    are carried as weighted ensembles whose samples are the tree leaves.
    """

    increments: np.ndarray
    tau: float
    seed: Optional[int] = None
    weights: Optional[np.ndarray] = None
    tree: Optional["ScenarioTree"] = field(default=None, repr=False)

    @property
    def sample_count(self) -> int:
        return self.increments.shape[0]

    @property
    def J(self) -> int:
        return self.increments.shape[1]

    @property
    def n_modes(self) -> int:
        return self.increments.shape[2]

    @property
    def probabilities(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.sample_count, 1.0 / self.sample_count)
        return self.weights

    def brownian(self, j: int) -> np.ndarray:
        """``beta_n(t_j)`` per sample, shape (S, n_modes)."""
        if j == 0:
            return np.zeros((self.sample_count, self.n_modes))
        return self.increments[:, :j, :].sum(axis=1)

    def mean(self, values: np.ndarray) -> np.ndarray:
        """Probability-weighted mean over the sample axis (axis 0), fixed order."""
        values = np.asarray(values, dtype=float)
        if self.weights is None:
            return values.mean(axis=0)
        return np.tensordot(self.weights, values, axes=(0, 0))

    def history_index(self, j: int) -> np.ndarray:
        """Integer label of each sample's increment history before step ``j``."""
        if j == 0:
            return np.zeros(self.sample_count, dtype=np.int64)
        if self.tree is not None:
            return np.arange(self.sample_count) // self.tree.branching ** (self.J - j)
        flat = self.increments[:, :j, :].reshape(self.sample_count, -1)
        _, inv = np.unique(flat, axis=0, return_inverse=True)
        return inv.ravel()

    def subset(self, idx) -> "NoiseEnsemble":
        w = None if self.weights is None else self.weights[idx]
        return NoiseEnsemble(self.increments[idx], self.tau, self.seed, w)


def _sample_stream(seed: int, sample: int, J: int, n_modes: int) -> np.ndarray:
    bg = np.random.Philox(key=np.array([seed, sample], dtype=np.uint64))
    raw = bg.random_raw(J * _MODE_STRIDE).reshape(J, _MODE_STRIDE)[:, :n_modes]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def sample_ensemble(spec: NoiseSpec, J: int, tau: float, sample_count: int, seed: int) -> NoiseEnsemble:
    """I.i.d. N(0, tau) increments; each value is a pure function of (seed, sample, j, mode)."""
    if J < 1 or not tau > 0 or sample_count < 1:
        raise ValueError("need J >= 1, tau > 0 and at least one sample")
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    inc = np.empty((sample_count, J, spec.n_modes))
    for i in range(sample_count):
        inc[i] = _sample_stream(seed, i, J, spec.n_modes)
    inc *= np.sqrt(tau)
    return NoiseEnsemble(inc, float(tau), seed)


def _prime_factors(k: int) -> list:
    out, p = [], 2
    while p * p <= k:
        while k % p == 0:
            out.append(p)
            k //= p
        p += 1
    if k > 1:
        out.append(k)
    return out


def coarsen(ensemble: NoiseEnsemble, factor: int) -> NoiseEnsemble:
    """Aggregate increments over blocks of ``factor`` steps.

    Aggregation proceeds prime factor by prime factor in ascending order, so
    repeated coarsening by 2 is bitwise equal to one coarsening by 4.
    """
    if factor < 1 or ensemble.J % factor:
        raise ValueError(f"factor {factor} does not divide J = {ensemble.J}")
    inc = ensemble.increments
    for p in _prime_factors(factor):
        S, J, N = inc.shape
        inc = inc.reshape(S, J // p, p, N).sum(axis=2)
    return replace(ensemble, increments=inc, tau=ensemble.tau * factor, tree=None)


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Full recombination-free tree of Gauss-Hermite increments.

    Each node has ``branching = m ** n_modes`` children; leaves are enumerated
    lexicographically, so the depth-``j`` ancestor of leaf ``i`` is
    ``i // branching ** (J - j)``.
    """

    J: int
    tau: float
    m: int
    n_modes: int
    child_increments: np.ndarray  # (branching, n_modes)
    child_probabilities: np.ndarray  # (branching,)

    @property
    def branching(self) -> int:
        return self.child_probabilities.shape[0]

    @property
    def leaf_count(self) -> int:
        return self.branching**self.J

    def node_count(self, j: int) -> int:
        return self.branching**j

    def leaf_paths(self) -> np.ndarray:
        """Child index per step for every leaf, shape (leaves, J)."""
        b, J = self.branching, self.J
        idx = np.arange(self.leaf_count)
        return np.stack([(idx // b ** (J - 1 - k)) % b for k in range(J)], axis=1)

    def leaf_probabilities(self) -> np.ndarray:
        return np.prod(self.child_probabilities[self.leaf_paths()], axis=1)

    def as_ensemble(self) -> NoiseEnsemble:
        inc = self.child_increments[self.leaf_paths()]
        return NoiseEnsemble(inc, self.tau, None, self.leaf_probabilities(), self)


def build_tree(spec: NoiseSpec, J: int, tau: float, m: int = 2, budget: int = DEFAULT_TREE_BUDGET) -> ScenarioTree:
    """Scenario tree with ``m``-point Gauss-Hermite increments per mode and step."""
    if m not in (2, 3):
        raise ValueError(f"tree quadrature order must be 2 or 3, got {m}")
    if J < 1 or not tau > 0:
        raise ValueError("need J >= 1 and tau > 0")
    leaves = m ** (spec.n_modes * J)
    if leaves > budget:
        raise TreeBudgetError(
            f"tree needs {leaves} leaves (m={m}, n_modes={spec.n_modes}, J={J}), budget is {budget}; "
            f"set tree.budget >= {leaves}"
        )
    x, w = np.polynomial.hermite_e.hermegauss(m)
    w = w / w.sum()
    x = np.where(np.abs(x) < 1e-14, 0.0, x)
    combos = list(itertools.product(range(m), repeat=spec.n_modes))
    inc = np.array([[x[c] for c in combo] for combo in combos]) * np.sqrt(tau)
    prob = np.array([np.prod([w[c] for c in combo]) for combo in combos])
    return ScenarioTree(J, float(tau), m, spec.n_modes, inc, prob)


def sample_tree_paths(tree: ScenarioTree, sample_count: int, seed: int) -> NoiseEnsemble:
    """I.i.d. paths drawn from the tree's increment law, as an unweighted ensemble."""
    cdf = np.cumsum(tree.child_probabilities)
    cdf[-1] = 1.0
    inc = np.empty((sample_count, tree.J, tree.n_modes))
    for i in range(sample_count):
        bg = np.random.Philox(key=np.array([seed, i], dtype=np.uint64))
        raw = bg.random_raw(tree.J)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        inc[i] = tree.child_increments[np.searchsorted(cdf, u)]
    return NoiseEnsemble(inc, tree.tau, seed)


def leaf_of(tree: ScenarioTree, ensemble: NoiseEnsemble) -> np.ndarray:
    """Tree leaf index of every path of an ensemble supported on the tree."""
    d = np.abs(ensemble.increments[:, :, None, :] - tree.child_increments[None, None, :, :]).max(axis=-1)
    child = np.argmin(d, axis=-1)
    if np.any(d[np.arange(d.shape[0])[:, None], np.arange(d.shape[1])[None, :], child] > 1e-12):
        raise ValueError("ensemble paths are not supported on the tree")
    b = tree.branching
    return (child * b ** np.arange(tree.J - 1, -1, -1)[None, :]).sum(axis=1)
