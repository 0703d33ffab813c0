"""Chi-squared CDF and minimal sample sizes for Gaussian trace estimators.

For a rank-r SPSD matrix and Gaussian probes, ``n tr_n(A) / tr(A)`` is
bounded in law by scaled chi-squared variables ``Q(m) = chi2_m / m``.  The
searches below find the smallest ``n`` for which the one-sided tail
conditions hold.

The CDF is the regularized lower incomplete gamma function ``P(n/2, x/2)``,
evaluated by its power series for ``x < a + 1`` and by a modified-Lentz
continued fraction for the upper tail otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "SampleSizeBound",
    "UpperSampleSizeBound",
    "NecessaryCheck",
    "regularized_gamma_p",
    "chisq_cdf",
    "scaled_lower_prob",
    "scaled_upper_prob",
    "min_n_lower",
    "min_n_upper",
    "necessary_lower_holds",
    "necessary_upper_holds",
]

_EPS = 1e-16
_TINY = 1e-300
_MAX_TERMS = 100_000
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _stirling_correction(a: float) -> float:
    # lgamma(a) - [(a - 1/2) ln a - a + ln(2 pi)/2]
    if a < 10.0:
        return math.lgamma(a) - ((a - 0.5) * math.log(a) - a + _HALF_LOG_2PI)
    r = 1.0 / (a * a)
    return (1.0 / 12 - r * (1.0 / 360 - r * (1.0 / 1260 - r * (1.0 / 1680 - r / 1188)))) / a


def _log_prefactor(a: float, x: float) -> float:
    # log(x**a e**-x / Gamma(a)) without the O(a) cancellation of the naive form
    mu = (x - a) / a
    if mu < -0.5:
        # far below the mode: no cancellation to avoid, and log1p(-1) would fail
        return a * (math.log(x) - math.log(a)) + (a - x) + 0.5 * math.log(a) - _HALF_LOG_2PI - _stirling_correction(a)
    return -a * (mu - math.log1p(mu)) + 0.5 * math.log(a) - _HALF_LOG_2PI - _stirling_correction(a)


def _gamma_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_TERMS):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    else:
        raise ArithmeticError(f"gamma series did not converge for a={a}, x={x}")
    return total * math.exp(_log_prefactor(a, x))


def _gamma_contfrac(a: float, x: float) -> float:
    # Q(a, x) by modified Lentz on the Legendre continued fraction
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_TERMS):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    else:
        raise ArithmeticError(f"gamma continued fraction did not converge for a={a}, x={x}")
    return math.exp(_log_prefactor(a, x)) * h


def regularized_gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma ``P(a, x)`` for ``a > 0, x >= 0``."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return min(1.0, _gamma_series(a, x))
    return max(0.0, 1.0 - _gamma_contfrac(a, x))


def chisq_cdf(degree: int, x: float) -> float:
    """``Pr(chi2_degree <= x)``."""
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    if x < 0:
        raise ValueError(f"x must be non-negative, got {x}")
    return regularized_gamma_p(0.5 * degree, 0.5 * x)


def _check_unit(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")


def scaled_lower_prob(n: int, eps: float) -> float:
    """``Pr(Q(n) < 1 - eps)`` with ``Q(n) = chi2_n / n``."""
    _check_unit("eps", eps)
    return chisq_cdf(n, n * (1.0 - eps))


def scaled_upper_prob(n: int, eps: float) -> float:
    """``Pr(Q(n) <= 1 + eps)``."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return chisq_cdf(n, n * (1.0 + eps))


@dataclass(frozen=True)
class SampleSizeBound:
    """Smallest qualifying ``n`` plus the probabilities either side of it.

    ``prob_prev`` is ``None`` when ``n`` is the first admissible integer.
    """

    n: int
    prob_at_n: float
    prob_prev: float | None


@dataclass(frozen=True)
class UpperSampleSizeBound(SampleSizeBound):
    """``n`` is the smallest qualifying integer above ``1/eps``;
    ``n_persistent`` the smallest one above ``eps**-2``, from which the
    condition holds for every larger sample size."""

    n_persistent: int = 0


def _search(ok, lo: int) -> int:
    """Smallest ``n >= lo`` with ``ok(n)``.

    Doubling to bracket, bisection inside the bracket, then a linear walk
    down while the predecessor also qualifies: monotonicity is verified at
    the boundary rather than assumed.
    """
    if ok(lo):
        return lo
    bad, hi = lo, max(lo + 1, 2 * lo)
    while not ok(hi):
        bad, hi = hi, 2 * hi
        if hi > 1 << 40:
            raise ArithmeticError("sample-size search failed to bracket")
    while hi - bad > 1:
        mid = (bad + hi) // 2
        if ok(mid):
            hi = mid
        else:
            bad = mid
    while hi - 1 >= lo and ok(hi - 1):
        hi -= 1
    return hi


def min_n_lower(eps: float, delta: float) -> SampleSizeBound:
    """Smallest ``n0`` with ``Pr(Q(n0) < 1 - eps) <= delta``."""
    _check_unit("eps", eps)
    _check_unit("delta", delta)
    n0 = _search(lambda n: scaled_lower_prob(n, eps) <= delta, 1)
    prev = scaled_lower_prob(n0 - 1, eps) if n0 > 1 else None
    return SampleSizeBound(n0, scaled_lower_prob(n0, eps), prev)


def min_n_upper(eps: float, delta: float) -> UpperSampleSizeBound:
    """Smallest ``n0 > 1/eps`` with ``Pr(Q(n0) <= 1 + eps) >= 1 - delta``."""
    _check_unit("eps", eps)
    _check_unit("delta", delta)

    def ok(n):
        return scaled_upper_prob(n, eps) >= 1.0 - delta

    lo = math.floor(1.0 / eps) + 1
    n0 = _search(ok, lo)
    n_pers = _search(ok, math.floor(eps**-2) + 1)
    prev = scaled_upper_prob(n0 - 1, eps) if n0 > lo else None
    return UpperSampleSizeBound(n0, scaled_upper_prob(n0, eps), prev, n_persistent=n_pers)


@dataclass(frozen=True)
class NecessaryCheck:
    """Outcome of the upper necessary condition; ``persistent`` is set when
    ``n > eps**-2 r**-2``, where the condition carries over to all larger n."""

    holds: bool
    probability: float
    persistent: bool


def necessary_lower_holds(n: int, r: int, eps: float, delta: float) -> bool:
    """Necessary condition for the lower tail bound at rank ``r``:
    ``Pr(Q(n r) < 1 - eps) <= delta``."""
    if n < 1 or r < 1:
        raise ValueError("n and r must be >= 1")
    _check_unit("delta", delta)
    return scaled_lower_prob(n * r, eps) <= delta


def necessary_upper_holds(n: int, r: int, eps: float, delta: float) -> NecessaryCheck:
    """Necessary condition for the upper tail bound at rank ``r``:
    ``Pr(Q(n r) <= 1 + eps) >= 1 - delta``; requires ``n > 1/eps``."""
    _check_unit("eps", eps)
    _check_unit("delta", delta)
    if r < 1:
        raise ValueError("r must be >= 1")
    if n <= 1.0 / eps:
        raise ValueError(f"precondition violated: n={n} must exceed 1/eps={1.0 / eps:g}")
    p = scaled_upper_prob(n * r, eps)
    return NecessaryCheck(p >= 1.0 - delta, p, n > eps**-2 * r**-2)
