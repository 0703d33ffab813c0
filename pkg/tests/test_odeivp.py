import math

import numpy as np
import pytest

from probstop.odeivp import (
    DEFAULT_TOLERANCE,
    INITIAL_STEP_FRACTION,
    IntegrationFailure,
    IvpProblem,
    OscillatorProblem,
    ToleranceSpec,
    adiabatic_drift,
    fixed_step,
    integrate,
)


def test_constant_solution():
    sol = integrate(IvpProblem(lambda t, u: np.zeros_like(u), np.array([3.5, -1.0]), 2.0))
    assert np.all(sol.v == np.array([3.5, -1.0]))
    assert sol.t[-1] == 2.0


def test_exponential_growth():
    sol = integrate(IvpProblem(lambda t, u: u, np.array([1.0]), 1.0), ToleranceSpec(1e-12, 1e-8))
    assert abs(sol.v[-1, 0] - math.e) / math.e < 1e-6


def test_dormand_prince_coefficients_against_scipy():
    # one step of the 5th-order result matches scipy's RK45 tableau
    from scipy.integrate._ivp.rk import RK45
    h = 0.1
    f = lambda t, u: np.array([u[1], -np.sin(u[0]) + 0.3 * t])
    y0 = np.array([0.4, -0.2])
    y1 = fixed_step(f, y0, h, 1)
    K = np.zeros((7, 2))
    K[0] = f(0.0, y0)
    for i in range(1, 6):
        K[i] = f(RK45.C[i] * h, y0 + h * (RK45.A[i, :i] @ K[:i]))
    ref = y0 + h * (RK45.B @ K[:6])
    np.testing.assert_allclose(y1, ref, rtol=1e-14, atol=1e-15)


def test_fifth_order_convergence():
    errs, hs = [], []
    for n in (8, 16, 32, 64):
        y = fixed_step(lambda t, u: u, [1.0], 1.0, n)
        errs.append(abs(y[0] - math.e))
        hs.append(1.0 / n)
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - 5.0) <= 0.5


def test_mesh_invariants_and_error_estimates():
    osc = OscillatorProblem(50.0)
    sol = integrate(osc.as_ivp(), DEFAULT_TOLERANCE)
    assert np.all(np.diff(sol.t) > 0) and sol.t[-1] == 1.0 and sol.t[0] == 0.0
    assert len(sol.error_estimates) == sol.accepted == len(sol.t) - 1
    assert max(sol.error_estimates) <= 1.0


def test_initial_step():
    seen = []

    def f(t, u):
        seen.append(t)
        return -u

    integrate(IvpProblem(f, np.array([1.0]), 4.0))
    # the second stage of the first step sits at c2 * h0
    assert seen[1] == pytest.approx(0.2 * INITIAL_STEP_FRACTION * 4.0)


def test_stiff_problem_underflows():
    # stability limits explicit steps to ~3e-16, below the 1e-14 b floor
    f = lambda t, u: -1e16 * (u - np.cos(t))
    with pytest.raises(IntegrationFailure, match="underflow"):
        integrate(IvpProblem(f, np.array([1.0]), 1.0))


def test_step_budget():
    with pytest.raises(IntegrationFailure, match="budget"):
        integrate(OscillatorProblem(1000.0).as_ivp(), max_steps=10)


def test_tolerance_validation():
    with pytest.raises(ValueError):
        ToleranceSpec(0.0, 0.0)
    with pytest.raises(ValueError):
        ToleranceSpec(-1.0, 1e-3)
    with pytest.raises(ValueError):
        integrate(IvpProblem(lambda t, u: u, np.ones(1), 0.0))


def test_oscillator_invariant_at_start():
    osc = OscillatorProblem(1000.0)
    assert osc.hamiltonian(1.0, 0.0, 0.0) == 0.5
    assert osc.invariant(1.0, 0.0, 0.0) == 0.5
    with pytest.raises(ValueError):
        OscillatorProblem(0.0)


def test_default_tolerance_step_count_fixture():
    res = adiabatic_drift(1000.0)
    assert 100 <= res.solution.accepted <= 10_000
    assert res.solution.accepted == 1910 and res.solution.rejected == 477


def test_drift_default_vs_strict():
    loose = adiabatic_drift(1000.0, ToleranceSpec(1e-6, 1e-3))
    strict = adiabatic_drift(1000.0, ToleranceSpec(1e-6, 1e-6))
    assert loose.drift > 10 / 1000.0
    assert strict.drift <= 5e-3
    assert strict.drift < loose.drift


def test_lambda_one_finite():
    res = adiabatic_drift(1.0, ToleranceSpec(1e-12, 1e-10))
    assert np.isfinite(res.drift) and np.all(np.isfinite(res.J))


def test_oscillator_against_scipy_reference():
    from scipy.integrate import solve_ivp
    osc = OscillatorProblem(20.0)
    ours = integrate(osc.as_ivp(), ToleranceSpec(1e-12, 1e-10))
    ref = solve_ivp(osc.rhs, (0, 1), [1.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(ours.v[-1], ref.y[:, -1], atol=1e-8)
