"""Conditional expectations E[. | F_{t_j}] on trees and on sampled ensembles.

Every estimator exposes ``condition(j, values)``: ``values`` has the sample
axis first and the result has the same shape, holding one estimate per
sample.  Vector-valued targets are regressed column by column against one
shared factorization.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .noise import NoiseEnsemble, ScenarioTree


class ConditioningError(np.linalg.LinAlgError):
    """Normal equations are singular and no ridge was requested."""


@dataclass(frozen=True)
class FeatureSpec:
    """Regression basis for least-squares Monte Carlo.

    kind
        ``"brownian"``: monomials of ``beta_n(t_j)``, ``n < modes``;
        ``"increments"``: monomials of the past increments ``dbeta_n^k``,
        ``k < j``, ``n < modes``; ``"history"``: indicators of the distinct
        increment histories (spans every F_{t_j}-measurable function when
        the increments take finitely many values).
    degree
        Total polynomial degree (ignored for ``"history"``).
    modes
        Number of noise modes used; None means ``min(n_modes, 4)``.
    ridge
        Relative ridge weight; the penalty is ``ridge * trace(Gram) / p``.
        The constant is never penalized.
    """

    kind: str = "brownian"
    degree: int = 1
    modes: int | None = None
    ridge: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("brownian", "increments", "history"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.degree < 1:
            raise ValueError("degree must be at least 1")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")


def _monomials(x: np.ndarray, degree: int) -> np.ndarray:
    cols = []
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(x.shape[1]), d):
            cols.append(np.prod(x[:, combo], axis=1))
    return np.column_stack(cols) if cols else np.zeros((x.shape[0], 0))


def features(ensemble: NoiseEnsemble, j: int, spec: FeatureSpec) -> np.ndarray:
    """Design matrix without the constant column; uses increments before step j only."""
    S = ensemble.sample_count
    if j == 0:
        return np.zeros((S, 0))
    m = spec.modes if spec.modes is not None else min(ensemble.n_modes, 4)
    m = min(m, ensemble.n_modes)
    if spec.kind == "brownian":
        return _monomials(ensemble.brownian(j)[:, :m], spec.degree)
    if spec.kind == "increments":
        x = ensemble.increments[:, :j, :m].reshape(S, -1)
        return _monomials(x, spec.degree)
    labels = ensemble.history_index(j)
    k = labels.max() + 1
    onehot = np.zeros((S, k))
    onehot[np.arange(S), labels] = 1.0
    return onehot[:, 1:]


class MeanCE:
    """Unconditional mean; exact only at j = 0 or for data independent of F."""

    kind = "mean"

    def __init__(self, ensemble: NoiseEnsemble):
        self.ensemble = ensemble

    def condition(self, j: int, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return np.broadcast_to(self.ensemble.mean(values), values.shape).copy()


def ce_tree(tree: ScenarioTree, j: int, values: np.ndarray, probabilities: np.ndarray | None = None) -> np.ndarray:
    """Node-indexed conditional expectation at depth ``j``, shape (b**j, ...)."""
    if not 0 <= j <= tree.J:
        raise ValueError(f"depth {j} outside [0, {tree.J}]")
    values = np.asarray(values, dtype=float)
    if values.shape[0] != tree.leaf_count:
        raise ValueError(f"expected {tree.leaf_count} leaf values, got {values.shape[0]}")
    p = tree.leaf_probabilities() if probabilities is None else probabilities
    nodes = tree.node_count(j)
    block = tree.leaf_count // nodes
    w = p.reshape(nodes, block)
    v = values.reshape((nodes, block) + values.shape[1:])
    num = np.einsum("nb,nb...->n...", w, v)
    den = w.sum(axis=1).reshape((nodes,) + (1,) * (values.ndim - 1))
    return num / den


class TreeCE:
    """Exact conditional expectation on a scenario-tree ensemble."""

    kind = "tree"

    def __init__(self, ensemble: NoiseEnsemble):
        if ensemble.tree is None:
            raise ValueError("tree conditional expectation needs a tree-derived ensemble")
        self.ensemble = ensemble
        self.tree = ensemble.tree

    def condition(self, j: int, values: np.ndarray) -> np.ndarray:
        node = ce_tree(self.tree, j, values, self.ensemble.probabilities)
        return np.repeat(node, self.tree.leaf_count // self.tree.node_count(j), axis=0)


class LSMCEstimator:
    """Least-squares Monte Carlo regression on past-increment features."""

    kind = "lsmc"

    def __init__(self, ensemble: NoiseEnsemble, spec: FeatureSpec | None = None):
        self.ensemble = ensemble
        self.spec = spec or FeatureSpec()
        self._cache: dict = {}

    def _design(self, j: int):
        if j in self._cache:
            return self._cache[j]
        w = self.ensemble.probabilities
        X = features(self.ensemble, j, self.spec)
        if X.shape[1]:
            mean = w @ X
            Xc = X - mean
            scale = np.sqrt(w @ Xc**2)
            keep = scale > 1e-13 * max(1.0, float(np.abs(X).max()))
            Z = Xc[:, keep] / scale[keep]
        else:
            Z = X
        fac = None
        if Z.shape[1]:
            gram = Z.T @ (w[:, None] * Z)
            p = gram.shape[0]
            rho = self.spec.ridge * np.trace(gram) / p
            if rho == 0.0:
                ev = np.linalg.eigvalsh(gram)
                if ev[0] <= 1e-12 * ev[-1]:
                    raise ConditioningError(
                        f"regression at step {j} is rank deficient "
                        f"(eigenvalue ratio {ev[0] / ev[-1]:.3g}); use ridge > 0"
                    )
            fac = sla.cho_factor(gram + rho * np.eye(p))
        self._cache[j] = (Z, fac)
        return Z, fac

    def coefficients(self, j: int, values: np.ndarray):
        """Intercept and standardized-feature coefficients of the fit."""
        values = np.asarray(values, dtype=float)
        flat = values.reshape(values.shape[0], -1)
        w = self.ensemble.probabilities
        intercept = self.ensemble.mean(flat)
        Z, fac = self._design(j)
        if fac is None:
            return intercept, np.zeros((0, flat.shape[1]))
        rhs = Z.T @ (w[:, None] * (flat - intercept))
        return intercept, sla.cho_solve(fac, rhs)

    def condition(self, j: int, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.ensemble.sample_count:
            raise ValueError("target sample count does not match the ensemble")
        if j == 0:
            return MeanCE(self.ensemble).condition(0, values)
        intercept, coef = self.coefficients(j, values)
        Z, _ = self._design(j)
        fit = intercept + Z @ coef
        return fit.reshape(values.shape)


def ce_lsmc(ensemble: NoiseEnsemble, j: int, values: np.ndarray, spec: FeatureSpec | None = None) -> np.ndarray:
    return LSMCEstimator(ensemble, spec).condition(j, values)


def make_estimator(kind: str, ensemble: NoiseEnsemble, spec: FeatureSpec | None = None):
    """Estimator factory keyed by ``ce.kind``."""
    if kind == "tree":
        return TreeCE(ensemble)
    if kind == "lsmc":
        return LSMCEstimator(ensemble, spec)
    if kind == "mean":
        return MeanCE(ensemble)
    raise ValueError(f"unknown conditional-expectation kind {kind!r}")
