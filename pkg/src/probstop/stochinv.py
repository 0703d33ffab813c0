"""Stochastic approximate Gauss-Newton inversion with probabilistic stopping.

Each outer iteration uses sampled misfits on four occasions:

1. fitting: a Gauss-Newton step on ``phi_hat(., n_k)``;
2. cross validation with ``n_c`` fresh probes, comparing the new and old
   iterates; failure doubles ``n_k`` and redoes the step;
3. an uncertainty check ``phi_hat(m_{k+1}, n_u) <= (1 - eps_u) rho``;
4. if that passes, termination when ``phi_hat(m_{k+1}, n_t) <= (1 + eps_t) rho``.

Every phase draws from its own seed subspace.  When a sample size reaches
``s`` the probes become the scaled identity and the estimate is the exact misfit;
exact values are cached per model, since they do not depend on probes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from probstop import chisq
from probstop.pdeforward import DataSet, ForwardModel, Grid, SolveCounter, SourceSet, probe_block, sampled_residual
from probstop.randprobe import Distribution, derive_seed

__all__ = [
    "stop_test_hard",
    "stop_test_soft",
    "cross_validation_test",
    "uncertainty_check",
    "ProbabilisticStopSpec",
    "PhaseSizes",
    "Schedule",
    "SampledMisfit",
    "StepResult",
    "asgn_step",
    "IterationRecord",
    "InverseState",
    "InversionResult",
    "invert",
    "DEFAULT_QUANTIFIERS",
]

DEFAULT_QUANTIFIERS = {"c": (0.05, 0.3), "u": (0.1, 0.3), "t": (0.1, 0.1)}

_PHASE_FIT, _PHASE_CV, _PHASE_U, _PHASE_T = 1, 2, 3, 4


def _check_eps(eps: float, allow_zero: bool = False) -> None:
    lo_ok = eps >= 0.0 if allow_zero else eps > 0.0
    if not (lo_ok and eps < 1.0):
        raise ValueError(f"eps must lie in {'[0' if allow_zero else '(0'}, 1), got {eps}")


def stop_test_hard(phi_hat: float, rho: float, eps: float) -> bool:
    """``phi_hat <= (1 - eps) rho``: passing implies ``phi <= rho`` w.h.p."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    _check_eps(eps)
    return phi_hat <= (1.0 - eps) * rho


def stop_test_soft(phi_hat: float, rho: float, eps: float) -> bool:
    """``phi_hat <= (1 + eps) rho``: failing implies ``phi > rho`` w.h.p."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    _check_eps(eps)
    return phi_hat <= (1.0 + eps) * rho


def cross_validation_test(phi_new: float, phi_old: float, eps: float) -> bool:
    """``(1 - eps) phi_new <= (1 + eps) phi_old`` on a shared fresh probe set."""
    _check_eps(eps)
    return (1.0 - eps) * phi_new <= (1.0 + eps) * phi_old


def uncertainty_check(phi_hat: float, rho: float, eps: float) -> bool:
    """``phi_hat <= (1 - eps) rho``; ``eps = 0`` is the plain deterministic check."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    _check_eps(eps, allow_zero=True)
    return phi_hat <= (1.0 - eps) * rho


@dataclass(frozen=True)
class PhaseSizes:
    n_c: int
    n_u: int
    n_t: int
    deterministic_c: bool
    deterministic_u: bool
    deterministic_t: bool


@dataclass(frozen=True)
class ProbabilisticStopSpec:
    """Discrepancy target plus the three ``(eps, delta)`` quantifier pairs.

    Sample sizes come from the Gaussian chi-squared bounds: the uncertainty
    check (a hard test) needs the lower-tail size, termination and cross
    validation use the larger of the lower and upper sizes so both the hard
    and the soft reading of the test are covered.
    """

    rho: float
    eps_c: float = 0.05
    delta_c: float = 0.3
    eps_u: float = 0.1
    delta_u: float = 0.3
    eps_t: float = 0.1
    delta_t: float = 0.1

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        for name in ("eps_c", "delta_c", "eps_u", "delta_u", "eps_t", "delta_t"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")

    def sizes(self, s: int) -> PhaseSizes:
        n_c = max(chisq.min_n_lower(self.eps_c, self.delta_c).n, chisq.min_n_upper(self.eps_c, self.delta_c).n)
        n_u = chisq.min_n_lower(self.eps_u, self.delta_u).n
        n_t = max(chisq.min_n_lower(self.eps_t, self.delta_t).n, chisq.min_n_upper(self.eps_t, self.delta_t).n)
        return PhaseSizes(min(n_c, s), min(n_u, s), min(n_t, s), n_c >= s, n_u >= s, n_t >= s)


@dataclass(frozen=True)
class Schedule:
    n0: int = 1
    growth: int = 2
    max_iterations: int = 40
    max_attempts: int = 200
    inner_cg_limit: int = 10
    max_backtracks: int = 12
    distribution: Distribution = Distribution.RADEMACHER
    vanilla: bool = False


class SampledMisfit:
    """``phi_hat(m) = ||P G(m) Q W - D W||_F^2 / n`` for a fixed probe block ``W``."""

    def __init__(self, grid: Grid, data: DataSet, sources: SourceSet, W: np.ndarray, counter: SolveCounter):
        self.grid, self.data, self.sources, self.W, self.counter = grid, data, sources, W, counter
        self.n = W.shape[1]

    def evaluate(self, m):
        """Return ``(phi_hat, model, R, U)``; costs ``n`` solves."""
        fm = ForwardModel(self.grid, m, self.counter)
        R, U = sampled_residual(fm, self.data, self.sources, self.W)
        return float(np.sum(R * R) / self.n), fm, R, U

    def value(self, m) -> float:
        return self.evaluate(m)[0]

    def _scatter(self, Y):
        out = np.zeros((self.grid.cells, Y.shape[1]))
        out[self.data.receivers] = Y
        return out

    def jac_vec(self, fm: ForwardModel, U, v):
        """``J v`` per probe column (``n`` solves)."""
        return -fm.solve(fm.dK_apply(v, U))[self.data.receivers]

    def jac_t_vec(self, fm: ForwardModel, U, Y):
        """``J^T Y`` summed over probe columns (``n`` adjoint solves)."""
        Lam = fm.solve(self._scatter(Y), project=True)
        return -fm.dK_adjoint(Lam, U)

    def gradient(self, fm: ForwardModel, R, U):
        return (2.0 / self.n) * self.jac_t_vec(fm, U, R)


@dataclass
class StepResult:
    m: np.ndarray
    phi_before: float
    phi_after: float
    grad_norm: float
    step_length: float
    cg_iterations: int
    backtracks: int
    success: bool


def _gn_direction(obj: SampledMisfit, fm, U, R, limit: int):
    """Truncated CG on ``J^T J p = -J^T R``; the truncation regularizes."""
    rhs = -obj.jac_t_vec(fm, U, R)
    p = np.zeros_like(rhs)
    r = rhs.copy()
    d = r.copy()
    rr = float(r @ r)
    rr0 = rr
    its = 0
    for its in range(1, limit + 1):
        Jd = obj.jac_vec(fm, U, d)
        dHd = float(np.sum(Jd * Jd))
        if dHd <= 0.0:
            its -= 1
            break
        alpha = rr / dHd
        p += alpha * d
        r -= alpha * obj.jac_t_vec(fm, U, Jd)
        rr_new = float(r @ r)
        if rr_new <= 1e-24 * rr0:
            break
        d = r + (rr_new / rr) * d
        rr = rr_new
    return p, its


def asgn_step(
    obj: SampledMisfit,
    m,
    inner_cg_limit: int = 10,
    max_backtracks: int = 12,
    armijo: float = 1e-4,
    grad_tol: float = 1e-12,
) -> StepResult:
    """One Gauss-Newton step with Armijo backtracking on the sampled misfit."""
    m = np.asarray(m, dtype=float)
    phi, fm, R, U = obj.evaluate(m)
    g = obj.gradient(fm, R, U)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= grad_tol * max(phi, 1.0) or phi == 0.0:
        return StepResult(m.copy(), phi, phi, gnorm, 0.0, 0, 0, True)
    p, its = _gn_direction(obj, fm, U, R, inner_cg_limit)
    slope = float(g @ p)
    if not slope < 0.0:
        p, slope = -g, -gnorm**2
    alpha = 1.0
    for bt in range(max_backtracks + 1):
        m_try = m + alpha * p
        phi_try = obj.value(m_try)
        if phi_try <= phi + armijo * alpha * slope:
            return StepResult(m_try, phi, phi_try, gnorm, alpha, its, bt, True)
        alpha *= 0.5
    return StepResult(m.copy(), phi, phi, gnorm, 0.0, its, max_backtracks, False)


@dataclass
class IterationRecord:
    k: int
    attempt: int
    n_k: int
    phi_fit_before: float
    phi_fit_after: float
    step_ok: bool
    cg_iterations: int
    backtracks: int
    phi_cv_new: float | None = None
    phi_cv_old: float | None = None
    cv_pass: bool | None = None
    phi_u: float | None = None
    uncertainty_pass: bool | None = None
    phi_t: float | None = None
    hard_pass: bool | None = None
    soft_pass: bool | None = None
    solves_fit: int = 0
    solves_cv: int = 0
    solves_u: int = 0
    solves_t: int = 0
    solve_count: int = 0
    accepted: bool = False


@dataclass
class InverseState:
    m: np.ndarray
    k: int = 0
    n_k: int = 1
    solve_count: int = 0
    history: list[IterationRecord] = field(default_factory=list)


@dataclass
class InversionResult:
    m: np.ndarray
    state: InverseState
    converged: bool
    reason: str
    sizes: PhaseSizes
    rho: float
    final_phi_hat: float | None
    vanilla_equivalent: int

    def report(self) -> dict:
        """JSON-serializable run report (no timestamps, deterministic)."""
        return {
            "converged": self.converged,
            "reason": self.reason,
            "rho": self.rho,
            "iterations": self.state.k,
            "final_n_k": self.state.n_k,
            "final_phi_hat": self.final_phi_hat,
            "solve_count": self.state.solve_count,
            "vanilla_equivalent_solves": self.vanilla_equivalent,
            "sizes": asdict(self.sizes),
            "records": [asdict(r) for r in self.state.history],
        }


class _PhaseEvaluator:
    """Evaluates phase estimates, caching exact (identity-probe) misfits by model."""

    def __init__(self, grid, data, sources, counter):
        self.grid, self.data, self.sources, self.counter = grid, data, sources, counter
        self._exact: dict[bytes, float] = {}

    def __call__(self, m, W) -> float:
        s = self.sources.s
        exact = W.shape == (s, s) and np.array_equal(W, math.sqrt(s) * np.eye(s))
        key = hashlib.blake2b(np.ascontiguousarray(m).tobytes(), digest_size=16).digest()
        if exact and key in self._exact:
            return self._exact[key]
        value = SampledMisfit(self.grid, self.data, self.sources, W, self.counter).value(m)
        if exact:
            if len(self._exact) > 8:
                self._exact.pop(next(iter(self._exact)))
            self._exact[key] = value
        return value


def invert(
    grid: Grid,
    data: DataSet,
    sources: SourceSet,
    spec: ProbabilisticStopSpec,
    schedule: Schedule = Schedule(),
    m0=None,
    seed: int = 0,
) -> InversionResult:
    """Run the four-phase stochastic inversion (or the all-data Vanilla variant)."""
    s = sources.s
    if data.s != s:
        raise ValueError("data and source counts differ")
    dist = Distribution.parse(schedule.distribution)
    sizes = spec.sizes(s)
    if schedule.vanilla:
        sizes = PhaseSizes(s, s, s, True, True, True)
    counter = SolveCounter()
    phase = _PhaseEvaluator(grid, data, sources, counter)
    m = np.zeros(grid.cells) if m0 is None else np.asarray(m0, dtype=float).copy()
    n_k = s if schedule.vanilla else min(max(1, schedule.n0), s)
    state = InverseState(m=m, n_k=n_k)
    vanilla_eq = 0
    converged, reason, final_phi = False, "iteration cap reached", None

    def block(phase_id, n, k, attempt):
        return probe_block(s, dist, n, derive_seed(seed, phase_id, k, attempt))

    attempt = 0
    while state.k < schedule.max_iterations:
        if attempt >= schedule.max_attempts:
            reason = "attempt cap reached"
            break
        attempt += 1
        k = state.k
        before = counter.count
        obj = SampledMisfit(grid, data, sources, block(_PHASE_FIT, state.n_k, k, attempt), counter)
        step = asgn_step(obj, state.m, schedule.inner_cg_limit, schedule.max_backtracks)
        rec = IterationRecord(
            k=k,
            attempt=attempt,
            n_k=state.n_k,
            phi_fit_before=step.phi_before,
            phi_fit_after=step.phi_after,
            step_ok=step.success,
            cg_iterations=step.cg_iterations,
            backtracks=step.backtracks,
        )
        rec.solves_fit = counter.count - before
        # same step with all s data sets: 2 field/adjoint passes, 2 per CG iteration, 1 per trial
        vanilla_eq += s * (2 + 2 * step.cg_iterations + step.backtracks + (1 if step.step_length > 0 else 0))
        state.history.append(rec)

        if not step.success:
            rec.solve_count = counter.count
            state.solve_count = counter.count
            if state.n_k >= s:
                reason = "line search failed with the full data set"
                break
            state.n_k = min(state.n_k * schedule.growth, s)
            continue

        m_new = step.m
        before = counter.count
        W_c = block(_PHASE_CV, sizes.n_c, k, attempt)
        rec.phi_cv_new = phase(m_new, W_c)
        rec.phi_cv_old = phase(state.m, W_c)
        rec.cv_pass = cross_validation_test(rec.phi_cv_new, rec.phi_cv_old, spec.eps_c)
        rec.solves_cv = counter.count - before
        vanilla_eq += 2 * s
        if not rec.cv_pass and state.n_k < s:
            state.n_k = min(state.n_k * schedule.growth, s)
            rec.solve_count = state.solve_count = counter.count
            continue

        rec.accepted = True
        state.m = m_new
        state.k += 1

        before = counter.count
        rec.phi_u = phase(m_new, block(_PHASE_U, sizes.n_u, k, attempt))
        rec.uncertainty_pass = uncertainty_check(rec.phi_u, spec.rho, spec.eps_u)
        rec.solves_u = counter.count - before
        vanilla_eq += s
        if rec.uncertainty_pass:
            before = counter.count
            rec.phi_t = phase(m_new, block(_PHASE_T, sizes.n_t, k, attempt))
            rec.hard_pass = stop_test_hard(rec.phi_t, spec.rho, spec.eps_t)
            rec.soft_pass = stop_test_soft(rec.phi_t, spec.rho, spec.eps_t)
            rec.solves_t = counter.count - before
            vanilla_eq += s
        rec.solve_count = state.solve_count = counter.count
        if rec.soft_pass:
            converged, reason, final_phi = True, "soft stopping test passed", rec.phi_t
            break
        if step.step_length == 0.0 and state.n_k >= s:
            reason = "stationary point reached above the discrepancy target"
            break

    state.solve_count = counter.count
    return InversionResult(state.m, state, converged, reason, sizes, spec.rho, final_phi, vanilla_eq)
