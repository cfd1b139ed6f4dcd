"""Discrete optimal boundary control: cost, adapted gradient, projected iteration.

The reduced gradient of the discrete cost over adapted, piecewise-constant
boundary controls is

    g_j = nu U_j + E_{t_j} tr P_{j+1},   P = S1(S0 R U + G - y_d),

represented in the ``tau * M_gamma`` inner product.  Sample-wise sweeps are
independent, so they run in sample chunks; only the conditional expectation
couples samples.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import fem
from .evolution import ControlProcess, FeasibilityError, iter_G
from .noise import NoiseEnsemble, NoiseSpec, mode_loads

logger = logging.getLogger(__name__)

SpaceTimeProfile = Callable[[float, np.ndarray, np.ndarray], np.ndarray]

# Upper bound on floats held by one sweep chunk (trajectory of Y over all steps).
_CHUNK_FLOATS = 2.5e7


def _const(c: float) -> SpaceTimeProfile:
    return lambda t, x, y: np.full_like(np.asarray(x, dtype=float), c)


YD_CATALOG: dict[str, SpaceTimeProfile] = {
    "zero": _const(0.0),
    "sinpit_xy": lambda t, x, y: np.sin(np.pi * t) * x * y,
    "cos_pix_cos_piy": lambda t, x, y: np.cos(np.pi * x) * np.cos(np.pi * y),
    "ramp_t_x": lambda t, x, y: t * x,
}


def yd_profile(name: str) -> SpaceTimeProfile:
    """Look up a target profile: catalog name or ``"const:<value>"``."""
    if name.startswith("const:"):
        return _const(float(name.split(":", 1)[1]))
    try:
        return YD_CATALOG[name]
    except KeyError:
        raise ValueError(f"unknown target profile {name!r}; known: const:<c>, {', '.join(YD_CATALOG)}") from None


@dataclass(eq=False)
class ControlProblem:
    """Discrete stochastic Neumann boundary control problem.

    ``noise`` is the sample source (a sampled ensemble or a tree ensemble);
    ``yd`` is a deterministic profile ``f(t, x, y)`` or a catalog name.
    """

    ops: fem.DiscreteOperators
    spec: NoiseSpec
    noise: NoiseEnsemble
    yd: SpaceTimeProfile | str | None = None
    nu: float = 1.0
    lower: float = -np.inf
    upper: float = np.inf
    T: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"control cost weight nu must be positive, got {self.nu}")
        if not self.lower < self.upper:
            raise FeasibilityError(f"empty admissible box: lower={self.lower} >= upper={self.upper}")
        if abs(self.tau * self.J - self.T) > 1e-12 * self.T:
            raise ValueError(f"tau * J = {self.tau * self.J} does not match T = {self.T}")
        if abs(self.noise.tau - self.tau) > 1e-12 * self.tau:
            raise ValueError("noise source and operators use different time steps")
        if isinstance(self.yd, str):
            self.yd = yd_profile(self.yd)

    @property
    def J(self) -> int:
        return self.noise.J

    @property
    def tau(self) -> float:
        return self.ops.tau

    @property
    def S(self) -> int:
        return self.noise.sample_count

    def yd_nodal(self) -> np.ndarray:
        """Interval averages of the L2 projection of ``y_d``, shape (J, N)."""
        if "yd" not in self._cache:
            out = np.zeros((self.J, self.ops.n))
            if self.yd is not None:
                for j in range(self.J):
                    load = sum(
                        w * fem.domain_load(self.ops, lambda x, y, t=(j + xq) * self.tau: self.yd(t, x, y))
                        for xq, w in zip(fem.GAUSS4_NODES, fem.GAUSS4_WEIGHTS)
                    )
                    out[j] = self.ops.mass_solve(load)
            self._cache["yd"] = out
        return self._cache["yd"]

    def mode_loads(self) -> np.ndarray:
        if "modes" not in self._cache:
            self._cache["modes"] = mode_loads(self.ops, self.spec)
        return self._cache["modes"]

    def chunks(self):
        size = max(1, int(_CHUNK_FLOATS // ((self.J + 1) * self.ops.n)))
        for start in range(0, self.S, size):
            yield slice(start, min(self.S, start + size))

    def uncontrolled(self):
        """``tr S1(G - y_d)_{j+1}`` (J, S, Nb) and ``1/2 sum tau E||G_j - y_d,j||_M^2``."""
        if "unc" not in self._cache:
            ops, J = self.ops, self.J
            yd = self.yd_nodal()
            tr = np.zeros((J, self.S, ops.nb))
            const = 0.0
            w = self.noise.probabilities
            for sl in self.chunks():
                sub = self.noise.subset(sl)
                if self.spec.is_silent:
                    G = np.zeros((J + 1, 1, ops.n))
                else:
                    G = np.stack(list(iter_G(ops, self.spec, sub, self.mode_loads())))
                q = G[:-1] - yd[:, None, :]
                ws = w[sl] if G.shape[1] > 1 else np.array([w[sl].sum()])
                const += 0.5 * ops.tau * float(np.einsum("jsi,jsi,s->", q, ops.mass(q), ws))
                P = np.zeros_like(G[0])
                for j in range(J - 1, -1, -1):
                    tr[j, sl] = fem.trace(ops, P)
                    P = ops.step_solve(ops.mass(P + ops.tau * q[j]))
            self._cache["unc"] = (tr, const)
        return self._cache["unc"]


def _intervals(problem: ControlProblem, U) -> np.ndarray:
    U = np.asarray(getattr(U, "values", U), dtype=float)
    if U.ndim == 2:
        U = U[:, None, :]
    if U.shape[0] != problem.J or U.shape[2] != problem.ops.nb or U.shape[1] not in (1, problem.S):
        raise fem.DimensionError(f"control has shape {U.shape}, expected ({problem.J}, 1 or {problem.S}, {problem.ops.nb})")
    return U


def _check_feasible(problem: ControlProblem, U: np.ndarray) -> None:
    if np.any(U < problem.lower) or np.any(U > problem.upper):
        raise FeasibilityError(
            f"control leaves [{problem.lower}, {problem.upper}]: range [{U.min()}, {U.max()}]"
        )


def _control_sweep(ops: fem.DiscreteOperators, U: np.ndarray):
    """Forward ``Y = S0 R U`` then ``tr S1(Y)_{j+1}``; returns traces and ``sum tau ||Y_j||_M^2``."""
    J, S, _ = U.shape
    loads = fem.boundary_load(ops, U)
    Y = np.zeros((J + 1, S, ops.n))
    for j in range(J):
        Y[j + 1] = ops.step_solve(ops.mass(Y[j]) + ops.tau * loads[j])
    energy = ops.tau * ops.mass_norm_sq(Y[:-1]).sum(axis=0)
    tr = np.zeros((J, S, ops.nb))
    P = np.zeros((S, ops.n))
    for j in range(J - 1, -1, -1):
        tr[j] = fem.trace(ops, P)
        P = ops.step_solve(ops.mass(P + ops.tau * Y[j]))
    return tr, energy


def sweep(problem: ControlProblem, U) -> tuple[np.ndarray, float]:
    """Adjoint traces ``tr P_{j+1}`` (J, S, Nb) and the cost at ``U``.

    The cost uses the duality identity for the state/noise cross term, so it
    needs no stored noise trajectory.
    """
    ops = problem.ops
    U = _intervals(problem, U)
    unc_tr, const = problem.uncontrolled()
    w = problem.noise.probabilities
    if U.shape[1] == 1:
        tr_u, energy = _control_sweep(ops, U)
        tr = unc_tr + tr_u
        quad = float(energy[0])
    else:
        tr = unc_tr.copy()
        quad = 0.0
        for sl in problem.chunks():
            tr_u, energy = _control_sweep(ops, U[:, sl])
            tr[:, sl] += tr_u
            quad += float(w[sl] @ energy)
    Ub = np.broadcast_to(U, tr.shape)
    cross = ops.tau * float(np.einsum("jsi,jsi,s->", Ub, ops.boundary_mass(unc_tr), w))
    ctrl = ops.tau * float(np.einsum("js,s->", ops.boundary_norm_sq(Ub), w))
    return tr, 0.5 * quad + cross + const + 0.5 * problem.nu * ctrl


def cost(problem: ControlProblem, U) -> float:
    """``1/2 sum_j tau E||Y_j + G_j - y_d,j||_M^2 + nu/2 sum_j tau E||U_j||_{M_gamma}^2``."""
    ops = problem.ops
    U = _intervals(problem, U)
    _check_feasible(problem, U)
    yd = problem.yd_nodal()
    w = problem.noise.probabilities
    data = 0.0
    for sl in problem.chunks():
        sub = problem.noise.subset(sl)
        Us = U if U.shape[1] == 1 else U[:, sl]
        loads = fem.boundary_load(ops, Us)
        Y = np.zeros((sub.sample_count, ops.n))
        Gs = iter_G(ops, problem.spec, sub, problem.mode_loads())
        G = next(Gs)
        for j in range(problem.J):
            r = Y + G - yd[j]
            data += ops.tau * float(w[sl] @ ops.mass_norm_sq(r))
            Y = ops.step_solve(ops.mass(Y) + ops.tau * loads[j])
            G = next(Gs)
    Ub = np.broadcast_to(U, (problem.J, problem.S, ops.nb))
    ctrl = ops.tau * float(np.einsum("js,s->", ops.boundary_norm_sq(Ub), w))
    return 0.5 * data + 0.5 * problem.nu * ctrl


def _check_estimator(problem: ControlProblem, ce) -> None:
    ens = getattr(ce, "ensemble", None)
    if ens is not problem.noise:
        if ens is None or ens.sample_count != problem.S or not np.array_equal(ens.increments, problem.noise.increments):
            raise ValueError("conditional-expectation estimator was built for a different noise source")


def conditioned_adjoint(problem: ControlProblem, tr: np.ndarray, ce) -> np.ndarray:
    """``E_{t_j} tr P_{j+1}`` for each interval."""
    return np.stack([ce.condition(j, tr[j]) for j in range(problem.J)])


def gradient(problem: ControlProblem, U, ce) -> np.ndarray:
    """Adapted gradient ``nu U_j + E_{t_j} tr P_{j+1}``, shape (J, S, Nb)."""
    _check_estimator(problem, ce)
    U = _intervals(problem, U)
    _check_feasible(problem, U)
    tr, _ = sweep(problem, U)
    return problem.nu * U + conditioned_adjoint(problem, tr, ce)


def project_box(U, lower: float, upper: float) -> np.ndarray:
    """Componentwise clamp to ``[lower, upper]``."""
    return np.clip(np.asarray(U, dtype=float), lower, upper)


def interval_norms(problem: ControlProblem, V: np.ndarray) -> np.ndarray:
    """``sqrt(E ||V_j||_{M_gamma}^2)`` per interval."""
    V = _intervals(problem, V)
    sq = problem.ops.boundary_norm_sq(V)
    if sq.shape[1] == 1:
        return np.sqrt(sq[:, 0])
    return np.sqrt(sq @ problem.noise.probabilities)


def control_norm(problem: ControlProblem, V) -> float:
    """Discrete ``L2(Omega; L2(0, T; L2(Gamma)))`` norm."""
    return float(np.sqrt(problem.tau * np.sum(interval_norms(problem, V) ** 2)))


def control_operator_norm(ops: fem.DiscreteOperators, J: int, iters: int = 60, seed: int = 0) -> float:
    """Largest eigenvalue of ``U -> tr S1(S0 R U)`` in the ``tau M_gamma`` pairing."""
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((J, 1, ops.nb))
    lam = 0.0
    for _ in range(iters):
        nrm = np.sqrt(ops.tau * ops.boundary_norm_sq(U).sum())
        U = U / nrm
        tr, _ = _control_sweep(ops, U)
        lam = ops.tau * float(np.einsum("jsi,jsi->", U, ops.boundary_mass(tr)))
        U = tr
    return lam


@dataclass
class SolveReport:
    iterations: int
    cost: float
    residuals: list
    costs: list
    seconds: float
    estimator: str
    step: float
    converged: bool

    @property
    def residual(self) -> float:
        return self.residuals[-1]


def solve(problem: ControlProblem, ce, step: float | str | None = None, tol: float = 1e-10,
          max_iter: int = 500, U0=None) -> tuple[ControlProcess, SolveReport]:
    """Projected-gradient iteration ``U <- clamp(U - s g)``.

    ``step=None`` uses ``s = 1/nu``, the pure fixed-point map
    ``U <- clamp(-E_{t_j} tr P_{j+1} / nu)``; ``step="auto"`` uses
    ``2 / (L + 2 nu)`` with ``L`` the control-to-adjoint operator norm.
    Iteration stops when the fixed-point residual
    ``max_j ||U_j - clamp(-E_{t_j} tr P_{j+1} / nu)||`` drops to ``tol``.
    """
    _check_estimator(problem, ce)
    nu = problem.nu
    if step is None:
        s = 1.0 / nu
    elif step == "auto":
        L = control_operator_norm(problem.ops, problem.J)
        s = min(1.0 / nu, 2.0 / (L + 2.0 * nu))
    else:
        s = float(step)
    if not 0 < s <= 1.0 / nu * (1 + 1e-12):
        raise ValueError(f"step must lie in (0, 1/nu], got {s}")
    start = time.perf_counter()
    if U0 is None:
        U = project_box(np.zeros((problem.J, 1, problem.ops.nb)), problem.lower, problem.upper)
    else:
        U = _intervals(problem, U0)
        _check_feasible(problem, U)
    residuals, costs = [], []
    converged = False
    for it in range(max_iter + 1):
        tr, c = sweep(problem, U)
        ghat = conditioned_adjoint(problem, tr, ce)
        fixed = project_box(-ghat / nu, problem.lower, problem.upper)
        res = float(np.max(interval_norms(problem, U - fixed)))
        residuals.append(res)
        costs.append(c)
        logger.debug("iteration %d cost=%.12g residual=%.3e", it, c, res)
        if res <= tol:
            converged = True
            break
        if it == max_iter:
            break
        U = project_box(U - s * (nu * U + ghat), problem.lower, problem.upper)
    if not converged:
        logger.warning("projected gradient stopped after %d iterations, residual %.3e", it, residuals[-1])
    Uf = np.broadcast_to(U, (problem.J, problem.S, problem.ops.nb)).copy()
    report = SolveReport(it, costs[-1], residuals, costs, time.perf_counter() - start,
                         getattr(ce, "kind", type(ce).__name__), s, converged)
    return ControlProcess(Uf, problem.lower, problem.upper, problem.tau), report


def random_adapted_probe(problem: ControlProblem, rng: np.random.Generator) -> np.ndarray:
    """Feasible control that is constant across samples sharing a history."""
    lo, hi = problem.lower, problem.upper
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("random probes need a bounded box")
    W = np.empty((problem.J, problem.S, problem.ops.nb))
    for j in range(problem.J):
        labels = problem.noise.history_index(j)
        vals = rng.uniform(lo, hi, size=(labels.max() + 1, problem.ops.nb))
        W[j] = vals[labels]
    return W


def vi_residual(problem: ControlProblem, U, ce, probe_count: int = 100, probes=None,
                rng: Optional[np.random.Generator] = None) -> float:
    """``min_W sum_j tau E <g_j, W_j - U_j>_{M_gamma}`` over feasible adapted probes."""
    U = _intervals(problem, U)
    g = gradient(problem, U, ce)
    if probes is None:
        rng = rng or np.random.default_rng(0)
        probes = [random_adapted_probe(problem, rng) for _ in range(probe_count)]
    w = problem.noise.probabilities
    Mg = problem.ops.boundary_mass(g)
    best = np.inf
    for W in probes:
        W = _intervals(problem, W)
        _check_feasible(problem, W)
        D = np.broadcast_to(W - U, g.shape)
        best = min(best, problem.tau * float(np.einsum("jsi,jsi,s->", D, Mg, w)))
    return best
