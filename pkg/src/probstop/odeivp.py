"""Adaptive Dormand-Prince 5(4) integration with local error control.

The controller only bounds per-step error estimates; nothing here measures
or controls the accumulated global error.  The slowly varying oscillator
shows what that costs for a marginally stable (Hamiltonian) system.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "IntegrationFailure",
    "IvpProblem",
    "ToleranceSpec",
    "MeshSolution",
    "OscillatorProblem",
    "integrate",
    "fixed_step",
    "DriftResult",
    "adiabatic_drift",
    "DEFAULT_TOLERANCE",
    "INITIAL_STEP_FRACTION",
]

INITIAL_STEP_FRACTION = 1e-3
_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 5.0

# Dormand & Prince (1980) coefficients
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array(row)
    for row in (
        [],
        [1 / 5],
        [3 / 40, 9 / 40],
        [44 / 45, -56 / 15, 32 / 9],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
        [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
    )
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class IntegrationFailure(ArithmeticError):
    """Step size underflow, typically a sign of stiffness."""


@dataclass(frozen=True)
class IvpProblem:
    f: Callable[[float, np.ndarray], np.ndarray]
    v0: np.ndarray
    b: float


@dataclass(frozen=True)
class ToleranceSpec:
    atol: float = 1e-6
    rtol: float = 1e-3

    def __post_init__(self):
        if self.atol < 0 or self.rtol < 0 or (self.atol == 0 and self.rtol == 0):
            raise ValueError("need atol > 0 or rtol > 0, both non-negative")


DEFAULT_TOLERANCE = ToleranceSpec()


@dataclass
class MeshSolution:
    t: np.ndarray
    v: np.ndarray
    accepted: int
    rejected: int
    error_estimates: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.accepted


def _stages(f, t, y, h, k1):
    K = np.empty((7, y.size))
    K[0] = k1
    for i in range(1, 7):
        K[i] = f(t + _C[i] * h, y + h * (_A[i] @ K[:i]))
    # FSAL: the last stage is evaluated at the 5th-order result
    return y + h * (_A[6] @ K[:6]), h * (_E @ K), K[6]


def integrate(
    problem: IvpProblem,
    tol: ToleranceSpec = DEFAULT_TOLERANCE,
    h0: float | None = None,
    max_steps: int = 10_000_000,
) -> MeshSolution:
    """Integrate over ``[0, b]`` with local extrapolation (propagate the 5th-order result).

    A step is accepted when ``max_i |err_i| / (atol + rtol |v_i|) <= 1`` with
    ``v`` the previous solution; the next step is
    ``h min(5, max(0.2, 0.9 est**-1/5))``.
    """
    b = float(problem.b)
    if not b > 0:
        raise ValueError("interval end b must be positive")
    f = problem.f
    y = np.array(problem.v0, dtype=float).reshape(-1)
    t = 0.0
    h = INITIAL_STEP_FRACTION * b if h0 is None else float(h0)
    h_min = 1e-14 * b
    ts, ys, errs = [t], [y.copy()], []
    accepted = rejected = 0
    k1 = np.asarray(f(t, y), dtype=float)
    while t < b:
        if accepted + rejected >= max_steps:
            raise IntegrationFailure(f"step budget {max_steps} exhausted at t={t:g}")
        last = t + h >= b
        if last:
            h = b - t
        y_new, err, k7 = _stages(f, t, y, h, k1)
        scale = tol.atol + tol.rtol * np.abs(y)
        est = float(np.max(np.abs(err) / scale))
        if not np.isfinite(est):
            est = np.inf
        if est <= 1.0:
            t = b if last else t + h
            y, k1 = y_new, k7
            accepted += 1
            ts.append(t)
            ys.append(y.copy())
            errs.append(est)
            fac = _FAC_MAX if est == 0.0 else min(_FAC_MAX, max(_FAC_MIN, _SAFETY * est ** -0.2))
        else:
            rejected += 1
            fac = _FAC_MIN if not np.isfinite(est) else min(1.0, max(_FAC_MIN, _SAFETY * est ** -0.2))
        h *= fac
        if h < h_min and t < b:
            raise IntegrationFailure(f"step size {h:g} underflowed at t={t:g}")
    return MeshSolution(np.array(ts), np.array(ys), accepted, rejected, errs)


def fixed_step(f, v0, b: float, n_steps: int) -> np.ndarray:
    """Propagate the 5th-order solution over ``n_steps`` equal steps (no control)."""
    y = np.array(v0, dtype=float).reshape(-1)
    h = b / n_steps
    t = 0.0
    k1 = np.asarray(f(t, y), dtype=float)
    for i in range(n_steps):
        y, _, k1 = _stages(f, t, y, h, k1)
        t = (i + 1) * h
    return y


@dataclass(frozen=True)
class OscillatorProblem:
    """``q' = lam^2 p, p' = -(1+t)^2 q`` with ``(q, p)(0) = (1, 0)`` on ``[0, 1]``."""

    lam: float
    q0: float = 1.0
    p0: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    def rhs(self, t, u):
        q, p = u
        return np.array([self.lam**2 * p, -((1.0 + t) ** 2) * q])

    def hamiltonian(self, q, p, t):
        return 0.5 * (((1.0 + t) * q) ** 2 + (self.lam * p) ** 2)

    def invariant(self, q, p, t):
        return self.hamiltonian(q, p, t) / (1.0 + t)

    def as_ivp(self) -> IvpProblem:
        return IvpProblem(self.rhs, np.array([self.q0, self.p0]), self.b)


@dataclass
class DriftResult:
    """``drift`` is the endpoint value ``|J(b) - J(0)| / J(0)``;
    ``max_deviation`` the largest relative deviation over the mesh."""

    lam: float
    tol: ToleranceSpec
    drift: float
    max_deviation: float
    solution: MeshSolution
    J: np.ndarray


def adiabatic_drift(
    lam: float, tol: ToleranceSpec = DEFAULT_TOLERANCE, max_steps: int = 10_000_000
) -> DriftResult:
    """Integrate the slowly varying oscillator and measure the invariant's drift."""
    osc = OscillatorProblem(lam)
    sol = integrate(osc.as_ivp(), tol, max_steps=max_steps)
    J = osc.invariant(sol.v[:, 0], sol.v[:, 1], sol.t)
    rel = np.abs(J - J[0]) / J[0]
    return DriftResult(lam, tol, float(rel[-1]), float(rel.max()), sol, J)
