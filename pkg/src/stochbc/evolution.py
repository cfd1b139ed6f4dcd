"""Discrete solution operators of the implicit-Euler / P1 scheme.

Arrays are step-major: a trajectory has shape (J + 1, S, N) and takes the
value ``values[j]`` on ``[t_j, t_{j+1})``; interval data (controls, loads,
sources) has shape (J, S, ...).  Deterministic data uses S = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .fem import DimensionError, DiscreteOperators, boundary_load, trace
from .noise import NoiseEnsemble, NoiseSpec, mode_loads


class FeasibilityError(ValueError):
    """Raised when a control violates its box bounds."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    values: np.ndarray
    tau: float

    @property
    def J(self) -> int:
        return self.values.shape[0] - 1

    @property
    def sample_count(self) -> int:
        return self.values.shape[1]

    def write_csv(self, directory, sample: int = 0) -> None:
        """Write ``traj_{sample}.csv`` with columns step,vertex,value."""
        from pathlib import Path

        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        v = self.values[:, sample, :]
        with open(out / f"traj_{sample}.csv", "w") as fh:
            fh.write("step,vertex,value\n")
            for j in range(v.shape[0]):
                for i in range(v.shape[1]):
                    fh.write(f"{j},{i},{float(v[j, i])!r}\n")


@dataclass(frozen=True, eq=False)
class ControlProcess:
    """Boundary control, piecewise constant in time, shape (J, S, Nb)."""

    values: np.ndarray
    lower: float
    upper: float
    tau: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise FeasibilityError(f"empty box: lower={self.lower} >= upper={self.upper}")
        v = self.values
        if np.any(v < self.lower) or np.any(v > self.upper):
            raise FeasibilityError(
                f"control leaves [{self.lower}, {self.upper}]: range [{v.min()}, {v.max()}]"
            )

    @property
    def J(self) -> int:
        return self.values.shape[0]


def _as_intervals(x, width: int) -> np.ndarray:
    x = np.asarray(getattr(x, "values", x), dtype=float)
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3 or x.shape[-1] != width:
        raise DimensionError(f"expected interval data of shape (J, S, {width}), got {x.shape}")
    return x


def forward_loads(ops: DiscreteOperators, loads: np.ndarray) -> Trajectory:
    """``(M + tau K) Y_{j+1} = M Y_j + tau loads_j`` with ``Y_0 = 0``."""
    loads = _as_intervals(loads, ops.n)
    J, S, N = loads.shape
    Y = np.zeros((J + 1, S, N))
    for j in range(J):
        Y[j + 1] = ops.step_solve(ops.mass(Y[j]) + ops.tau * loads[j])
    return Trajectory(Y, ops.tau)


def forward_S0(ops: DiscreteOperators, U) -> Trajectory:
    """Controlled state ``S0^{h,tau} R U`` for a boundary control (J, S, Nb)."""
    U = _as_intervals(U, ops.nb)
    return forward_loads(ops, boundary_load(ops, U))


def iter_G(ops: DiscreteOperators, spec: NoiseSpec, ensemble: NoiseEnsemble,
           loads: np.ndarray | None = None) -> Iterator[np.ndarray]:
    """Yield ``G_0, ..., G_J`` (each (S, N)) without storing the trajectory."""
    if abs(ensemble.tau - ops.tau) > 1e-12 * ops.tau:
        raise DimensionError(f"ensemble step {ensemble.tau} differs from operator step {ops.tau}")
    if ensemble.n_modes != spec.n_modes:
        raise DimensionError("ensemble and noise spec disagree on the mode count")
    b = mode_loads(ops, spec) if loads is None else loads
    coef = spec.coefficients(ensemble.J, ensemble.tau)
    G = np.zeros((ensemble.sample_count, ops.n))
    yield G
    for j in range(ensemble.J):
        src = (ensemble.increments[:, j, :] * coef[j]) @ b
        G = ops.step_solve(ops.mass(G) + src)
        yield G


def forward_G(ops: DiscreteOperators, spec: NoiseSpec, ensemble: NoiseEnsemble) -> Trajectory:
    """Noise convolution ``G_{h,tau}`` per sample."""
    return Trajectory(np.stack(list(iter_G(ops, spec, ensemble))), ops.tau)


def backward_S1(ops: DiscreteOperators, q) -> Trajectory:
    """``(M + tau K) P_j = M P_{j+1} + tau M q_j`` with ``P_J = 0``."""
    q = _as_intervals(q, ops.n)
    J, S, N = q.shape
    P = np.zeros((J + 1, S, N))
    for j in range(J - 1, -1, -1):
        P[j] = ops.step_solve(ops.mass(P[j + 1] + ops.tau * q[j]))
    return Trajectory(P, ops.tau)


def duality_sides(ops: DiscreteOperators, f, g, weights=None) -> tuple[float, float]:
    """Both sides of the discrete forward/backward duality identity.

    ``lhs = sum_j tau E[Y_j^T M g_j]`` with ``Y = S0 R f`` and
    ``rhs = sum_j tau E[f_j^T M_gamma tr P_{j+1}]`` with ``P = S1 g``.
    """
    f = _as_intervals(f, ops.nb)
    g = _as_intervals(g, ops.n)
    Y = forward_S0(ops, f).values
    P = backward_S1(ops, g).values
    S = f.shape[1]
    w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights)
    lhs = ops.tau * np.einsum("jsi,jsi,s->", Y[:-1], ops.mass(g), w)
    rhs = ops.tau * np.einsum("jsi,jsi,s->", f, ops.boundary_mass(trace(ops, P[1:])), w)
    return float(lhs), float(rhs)


def duality_gap(ops: DiscreteOperators, f, g, weights=None) -> float:
    lhs, rhs = duality_sides(ops, f, g, weights)
    return abs(lhs - rhs)


def cond_exp_G(ops: DiscreteOperators, G_j: np.ndarray, horizon: int) -> np.ndarray:
    """``E_{t_j} G_{j+horizon}``: future increments are centred, so only the
    homogeneous step map acts."""
    out = np.asarray(G_j, dtype=float)
    for _ in range(horizon):
        out = ops.step(out)
    return out


def apply_Ptau(process: np.ndarray, ce, substeps: bool = False) -> np.ndarray:
    """Interval average followed by conditioning on ``F_{t_j}``.

    ``process`` has shape (J, S, ...) for piecewise-constant data, or
    (J, r, S, ...) with ``substeps=True`` when each interval carries ``r``
    equal sub-steps.  ``ce.condition(j, values)`` supplies the conditional
    expectation.
    """
    process = np.asarray(process, dtype=float)
    avg = process.mean(axis=1) if substeps else process
    return np.stack([ce.condition(j, avg[j]) for j in range(avg.shape[0])])
