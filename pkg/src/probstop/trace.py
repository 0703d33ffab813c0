"""Monte Carlo trace estimation for implicit SPSD matrices ``A = B^T B``.

``A`` is never formed: every estimator touches it only through products
``W -> B W`` on blocks of probe vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from probstop import chisq
from probstop.randprobe import Distribution, ProbeStream, derive_seed, draw_probes

__all__ = [
    "ImplicitSpsd",
    "ProbePlan",
    "TraceEstimate",
    "CalibrationResult",
    "c_constant",
    "estimate_trace",
    "exact_trace",
    "plan_probes",
    "calibrate_failure_rate",
    "fixture_operator",
    "FIXTURE_FAMILIES",
]


@dataclass(frozen=True)
class ImplicitSpsd:
    """``A = B^T B`` given by ``apply_b``, which maps an (s,) vector or an
    (s, k) block of column vectors to ``B`` applied columnwise."""

    apply_b: Callable[[np.ndarray], np.ndarray]
    size: int
    rank_hint: int | None = None

    @classmethod
    def from_matrix(cls, B, rank_hint: int | None = None) -> ImplicitSpsd:
        B = np.atleast_2d(np.asarray(B, dtype=float))
        return cls(lambda W: B @ W, B.shape[1], rank_hint)

    def quadratic(self, W: np.ndarray) -> np.ndarray:
        """``(w, A w) = ||B w||^2`` for each column of ``W``."""
        BW = np.asarray(self.apply_b(W), dtype=float)
        if BW.ndim == 1:
            BW = BW[:, None]
        return np.einsum("ij,ij->j", BW, BW)


@dataclass(frozen=True)
class TraceEstimate:
    value: float
    n: int
    distribution: Distribution
    seed: int


def c_constant(eps: float, delta: float) -> float:
    """``eps**-2 ln(2/delta)``."""
    _check_pair(eps, delta)
    return math.log(2.0 / delta) / eps**2


def _check_pair(eps: float, delta: float) -> None:
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


@dataclass(frozen=True)
class ProbePlan:
    """Sample sizes guaranteeing relative accuracy ``eps`` with probability
    ``1 - delta``.

    The ``n_sufficient_*`` fields are the distribution-free Hutchinson-type
    bounds (8c Gaussian, 6c Rademacher).  The ``n_chisq_*`` fields are the
    sharper Gaussian one-sided sizes at level ``delta``; ``n_chisq_two_sided``
    splits ``delta`` evenly between the two tails.
    """

    eps: float
    delta: float
    c: float
    n_sufficient_gaussian: int
    n_sufficient_rademacher: int
    n_chisq_sufficient_lower: int
    n_chisq_sufficient_upper: int
    n_chisq_upper_persistent: int
    n_chisq_two_sided: int

    def n_for(self, distribution: Distribution | str) -> int:
        if Distribution.parse(distribution) is Distribution.GAUSSIAN:
            return self.n_sufficient_gaussian
        return self.n_sufficient_rademacher


def plan_probes(eps: float, delta: float) -> ProbePlan:
    c = c_constant(eps, delta)
    lower = chisq.min_n_lower(eps, delta)
    upper = chisq.min_n_upper(eps, delta)
    two_sided = max(chisq.min_n_lower(eps, delta / 2).n, chisq.min_n_upper(eps, delta / 2).n)
    return ProbePlan(
        eps=eps,
        delta=delta,
        c=c,
        n_sufficient_gaussian=math.ceil(8 * c),
        n_sufficient_rademacher=math.ceil(6 * c),
        n_chisq_sufficient_lower=lower.n,
        n_chisq_sufficient_upper=upper.n,
        n_chisq_upper_persistent=upper.n_persistent,
        n_chisq_two_sided=two_sided,
    )


def _probe_values(op: ImplicitSpsd, stream: ProbeStream, n: int, chunk: int) -> np.ndarray:
    out = np.empty(n)
    for start in range(0, n, chunk):
        W = draw_probes(stream, start, min(chunk, n - start))
        q = op.quadratic(W)
        if q.shape != (W.shape[1],):
            raise ValueError("apply_b returned a block with the wrong number of columns")
        out[start : start + W.shape[1]] = q
    return out


def estimate_trace(
    op: ImplicitSpsd,
    distribution: Distribution | str,
    n: int,
    seed: int,
    chunk: int = 4096,
) -> TraceEstimate:
    """``(1/n) sum_i ||B w_i||^2`` over probes ``0..n-1`` of the seeded stream.

    Per-probe terms are reduced in probe-index order, so the value does not
    depend on how the blocks were evaluated.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    dist = Distribution.parse(distribution)
    stream = ProbeStream(dist, op.size, seed)
    try:
        values = _probe_values(op, stream, n, chunk)
    except ValueError as exc:
        # matmul shape errors surface as ValueError too
        raise ValueError(f"dimension mismatch between operator and probes: {exc}") from exc
    return TraceEstimate(float(math.fsum(values) / n), n, dist, seed)


def exact_trace(op: ImplicitSpsd) -> float:
    """``tr(A)`` from ``s`` products with the identity columns."""
    return float(math.fsum(op.quadratic(np.eye(op.size))))


@dataclass(frozen=True)
class CalibrationResult:
    failure_rate: float
    failures: int
    trials: int
    exact: float
    n: int

    @property
    def standard_error(self) -> float:
        p = self.failure_rate
        return math.sqrt(max(p * (1 - p), 0.0) / self.trials)


def calibrate_failure_rate(
    op: ImplicitSpsd,
    distribution: Distribution | str,
    n: int,
    eps: float,
    trials: int,
    seed: int,
    exact: float | None = None,
) -> CalibrationResult:
    """Empirical ``Pr(|tr_D(A) - tr(A)| > eps tr(A))`` over independent trials.

    Trial ``t`` uses the probe stream seeded by ``derive_seed(seed, t)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if n < 1:
        raise ValueError("n must be >= 1")
    dist = Distribution.parse(distribution)
    tr = exact_trace(op) if exact is None else float(exact)
    if tr <= 0.0:
        raise ValueError("relative criterion undefined for tr(A) = 0")
    failures = 0
    for t in range(trials):
        est = math.fsum(_probe_values(op, ProbeStream(dist, op.size, derive_seed(seed, t)), n, 4096)) / n
        if abs(est - tr) > eps * tr:
            failures += 1
    return CalibrationResult(failures / trials, failures, trials, tr, n)


FIXTURE_FAMILIES = ("identity", "diag", "rank-1", "random-psd")


def fixture_operator(family: str, s: int, seed: int = 0) -> ImplicitSpsd:
    """Small explicit test operators.

    ``diag`` is ``B = diag(1..s)``; ``rank-1`` a single random row;
    ``random-psd`` a dense ``s x s`` Gaussian ``B``.
    """
    rng = np.random.default_rng(seed)
    if family == "identity":
        return ImplicitSpsd(lambda W: W, s, s)
    if family == "diag":
        d = np.arange(1.0, s + 1.0)
        return ImplicitSpsd(lambda W: (d * W.T).T, s, s)
    if family == "rank-1":
        return ImplicitSpsd.from_matrix(rng.standard_normal((1, s)), rank_hint=1)
    if family == "random-psd":
        return ImplicitSpsd.from_matrix(rng.standard_normal((s, s)) / math.sqrt(s), rank_hint=s)
    raise ValueError(f"unknown matrix family {family!r}; expected one of {FIXTURE_FAMILIES}")
