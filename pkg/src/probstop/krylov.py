"""Matrix-free iterative solvers for SPD systems and the model Poisson benchmark.

All solvers start from ``u0 = 0`` and stop at the first iterate with
``||r_k|| <= rho ||r_0||``.  Residual norms are taken from the recurrence,
as a textbook implementation would.

MR is Orthomin(2), i.e. the conjugate-residual recurrence, which minimizes
the residual over the Krylov space for symmetric operators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericalBreakdown",
    "LinearOperator",
    "PoissonOperator",
    "SolverTrace",
    "solve_cg",
    "solve_mr",
    "solve_sd",
    "solve_lsd",
    "SOLVERS",
    "poisson_benchmark",
    "loglog_slope",
    "BENCHMARK_SIDES",
]

BENCHMARK_SIDES = (7, 15, 31, 63, 127)


class NumericalBreakdown(ArithmeticError):
    """A search direction with non-positive curvature was encountered."""


@dataclass(frozen=True)
class LinearOperator:
    apply: Callable[[np.ndarray], np.ndarray]
    size: int
    spd: bool = True

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.apply(v)

    @classmethod
    def from_matrix(cls, A) -> LinearOperator:
        A = np.asarray(A, dtype=float)
        return cls(lambda v: A @ v, A.shape[0])

    @classmethod
    def scaled_identity(cls, s: int, c: float = 1.0) -> LinearOperator:
        return cls(lambda v: c * v, s)


class PoissonOperator(LinearOperator):
    """5-point Dirichlet Laplacian ``-Delta_h`` on a ``side x side`` interior grid.

    Applied matrix-free; ``h = 1/(side + 1)``.
    """

    def __init__(self, side: int):
        if side < 1:
            raise ValueError("grid side must be >= 1")
        self.side = side
        self.h = 1.0 / (side + 1)
        inv_h2 = 1.0 / self.h**2

        def apply(v: np.ndarray) -> np.ndarray:
            U = v.reshape(side, side)
            out = 4.0 * U
            out[1:, :] -= U[:-1, :]
            out[:-1, :] -= U[1:, :]
            out[:, 1:] -= U[:, :-1]
            out[:, :-1] -= U[:, 1:]
            out *= inv_h2
            return out.reshape(-1)

        super().__init__(apply, side * side, True)

    @property
    def lambda_max(self) -> float:
        return 4.0 / self.h**2 * (1.0 + math.cos(math.pi * self.h))

    @property
    def lambda_min(self) -> float:
        return 4.0 / self.h**2 * (1.0 - math.cos(math.pi * self.h))

    @property
    def condition_number(self) -> float:
        return self.lambda_max / self.lambda_min

    def sine_mode(self, i: int, j: int) -> np.ndarray:
        k = np.arange(1, self.side + 1)
        return np.outer(np.sin(i * math.pi * k * self.h), np.sin(j * math.pi * k * self.h)).reshape(-1)

    def rhs(self) -> np.ndarray:
        return np.ones(self.size)


@dataclass
class SolverTrace:
    """Per-iteration record; ``residual_history[k]`` is ``||r_k||_2``."""

    method: str
    rho: float
    iterations: int = 0
    converged: bool = False
    residual_history: list[float] = field(default_factory=list)
    step_history: list[float] = field(default_factory=list)

    @property
    def relative_residuals(self) -> np.ndarray:
        r = np.asarray(self.residual_history)
        return r / r[0] if r.size and r[0] > 0 else r

    @property
    def final_relres(self) -> float:
        return float(self.relative_residuals[-1]) if self.residual_history else float("nan")


def _setup(op, b, rho, method):
    if rho <= 0:
        raise ValueError("rho must be positive")
    b = np.asarray(b, dtype=float)
    if b.shape != (op.size,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({op.size},)")
    trace = SolverTrace(method, rho)
    r = b.copy()
    rnorm = float(np.linalg.norm(r))
    trace.residual_history.append(rnorm)
    return np.zeros_like(b), r, rnorm, rnorm * rho, trace


def _curvature(p, Ap, what):
    curv = float(p @ Ap)
    if not curv > 0.0:
        raise NumericalBreakdown(f"non-positive curvature {curv:g} along {what}")
    return curv


def solve_cg(op, b, rho: float, max_iter: int = 1_000_000):
    u, r, rnorm, target, trace = _setup(op, b, rho, "CG")
    if rnorm <= target:
        trace.converged = True
        return u, trace
    p = r.copy()
    rr = rnorm**2
    for k in range(1, max_iter + 1):
        Ap = op(p)
        alpha = rr / _curvature(p, Ap, "search direction")
        u += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        trace.residual_history.append(math.sqrt(rr_new))
        trace.iterations = k
        if math.sqrt(rr_new) <= target:
            trace.converged = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return u, trace


def solve_mr(op, b, rho: float, max_iter: int = 1_000_000):
    u, r, rnorm, target, trace = _setup(op, b, rho, "MR")
    if rnorm <= target:
        trace.converged = True
        return u, trace
    Ar = op(r)
    rAr = _curvature(r, Ar, "residual")
    p, Ap = r.copy(), Ar.copy()
    for k in range(1, max_iter + 1):
        ApAp = float(Ap @ Ap)
        if ApAp == 0.0:
            raise NumericalBreakdown("A p vanished")
        alpha = rAr / ApAp
        u += alpha * p
        r -= alpha * Ap
        rnorm = float(np.linalg.norm(r))
        trace.residual_history.append(rnorm)
        trace.iterations = k
        if rnorm <= target:
            trace.converged = True
            break
        Ar = op(r)
        rAr_new = _curvature(r, Ar, "residual")
        beta = rAr_new / rAr
        p = r + beta * p
        Ap = Ar + beta * Ap
        rAr = rAr_new
    return u, trace


def solve_sd(op, b, rho: float, max_iter: int = 1_000_000):
    u, r, rnorm, target, trace = _setup(op, b, rho, "SD")
    if rnorm <= target:
        trace.converged = True
        return u, trace
    for k in range(1, max_iter + 1):
        Ar = op(r)
        alpha = rnorm**2 / _curvature(r, Ar, "residual")
        trace.step_history.append(alpha)
        u += alpha * r
        r -= alpha * Ar
        rnorm = float(np.linalg.norm(r))
        trace.residual_history.append(rnorm)
        trace.iterations = k
        if rnorm <= target:
            trace.converged = True
            break
    return u, trace


def solve_lsd(op, b, rho: float, max_iter: int = 1_000_000):
    """Gradient descent with the steepest-descent step of the previous residual.

    The first step has no lagged residual and uses the current SD step.
    """
    u, r, rnorm, target, trace = _setup(op, b, rho, "LSD")
    if rnorm <= target:
        trace.converged = True
        return u, trace
    alpha = None
    for k in range(1, max_iter + 1):
        Ar = op(r)
        alpha_sd = rnorm**2 / _curvature(r, Ar, "residual")
        if alpha is None:
            alpha = alpha_sd
        trace.step_history.append(alpha)
        u += alpha * r
        r -= alpha * Ar
        rnorm = float(np.linalg.norm(r))
        trace.residual_history.append(rnorm)
        trace.iterations = k
        if rnorm <= target:
            trace.converged = True
            break
        alpha = alpha_sd
    return u, trace


SOLVERS = {"MR": solve_mr, "CG": solve_cg, "SD": solve_sd, "LSD": solve_lsd}


def poisson_benchmark(
    sides: Sequence[int] = BENCHMARK_SIDES,
    rho: float = 1e-7,
    methods: Sequence[str] = ("MR", "CG", "SD", "LSD"),
    max_iter: int = 1_000_000,
    keep_traces: bool = False,
) -> list[dict]:
    """Iteration counts for each method on the Poisson problem ``-Delta u = 1``.

    Returns one row per (s, method) with keys ``s, side, method,
    iterations, final_relres, converged`` (plus ``trace`` if requested).
    """
    rows = []
    for side in sides:
        op = PoissonOperator(side)
        b = op.rhs()
        for name in methods:
            _, tr = SOLVERS[name.upper()](op, b, rho, max_iter)
            row = {
                "s": op.size,
                "side": side,
                "method": name.upper(),
                "iterations": tr.iterations,
                "final_relres": tr.final_relres,
                "converged": tr.converged,
            }
            if keep_traces:
                row["trace"] = tr
            rows.append(row)
    return rows


def loglog_slope(s_values, counts) -> float:
    """Least-squares slope of ``log(count)`` against ``log(s)``."""
    x = np.log(np.asarray(s_values, dtype=float))
    y = np.log(np.asarray(counts, dtype=float))
    return float(np.polyfit(x, y, 1)[0])
