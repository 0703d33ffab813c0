import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probstop.krylov import (
    LinearOperator,
    NumericalBreakdown,
    PoissonOperator,
    SOLVERS,
    loglog_slope,
    poisson_benchmark,
    solve_cg,
    solve_lsd,
    solve_mr,
    solve_sd,
)


def dense_poisson(side):
    T = 2 * np.eye(side) - np.eye(side, k=1) - np.eye(side, k=-1)
    I = np.eye(side)
    return (np.kron(I, T) + np.kron(T, I)) * (side + 1) ** 2


@pytest.mark.parametrize("side", [1, 3, 6])
def test_stencil_matches_assembled_matrix(side):
    op = PoissonOperator(side)
    A = dense_poisson(side)
    V = np.random.default_rng(side).standard_normal((side * side, 3))
    for v in V.T:
        np.testing.assert_allclose(op(v), A @ v, rtol=1e-12)


@pytest.mark.parametrize("side", [7, 31])
def test_eigen_extremes_from_sine_modes(side):
    op = PoissonOperator(side)
    lo, hi = op.sine_mode(1, 1), op.sine_mode(side, side)
    np.testing.assert_allclose(op(lo), op.lambda_min * lo, rtol=1e-10, atol=1e-10 * op.lambda_min)
    np.testing.assert_allclose(op(hi), op.lambda_max * hi, rtol=1e-10, atol=1e-10 * op.lambda_max)


@pytest.mark.parametrize("side", [15, 31, 63, 127])
def test_condition_number_estimate(side):
    op = PoissonOperator(side)
    # kappa = cot^2(pi h / 2) ~ (2 / (pi h))^2; with s = side^2 the gap is about 2/side
    assert op.condition_number == pytest.approx((2 / (math.pi * op.h)) ** 2, rel=0.05)
    rel = abs(op.condition_number / ((2 / math.pi) ** 2 * op.size) - 1)
    assert rel == pytest.approx(2 / side, rel=0.1)


def test_spd_flag_spot_check():
    op = PoissonOperator(5)
    V = np.random.default_rng(1).standard_normal((25, 50))
    assert op.spd and all(v @ op(v) > 0 for v in V.T)


@pytest.mark.parametrize("name", ["CG", "MR", "SD", "LSD"])
def test_identity_one_iteration(name):
    b = np.arange(1.0, 6.0)
    u, tr = SOLVERS[name](LinearOperator.scaled_identity(5), b, 1e-10)
    assert tr.iterations == 1 and tr.converged
    np.testing.assert_allclose(u, b)


@pytest.mark.parametrize("c", [0.01, 3.0, 250.0])
def test_scaled_identity_sd_and_lsd(c):
    b = np.ones(4)
    _, tr = solve_sd(LinearOperator.scaled_identity(4, c), b, 1e-12)
    assert tr.iterations == 1
    _, tr = solve_lsd(LinearOperator.scaled_identity(4, c), b, 1e-12)
    assert tr.converged and tr.step_history[0] == pytest.approx(1 / c)


@pytest.mark.parametrize("side,expected", [(7, 9), (15, 26)])
def test_cg_table_rows(side, expected):
    op = PoissonOperator(side)
    _, tr = solve_cg(op, op.rhs(), 1e-7)
    assert tr.iterations == expected


@pytest.mark.parametrize("side,expected", [(7, 9), (31, 54)])
def test_mr_table_rows(side, expected):
    op = PoissonOperator(side)
    _, tr = solve_mr(op, op.rhs(), 1e-7)
    assert tr.iterations == expected


@pytest.mark.parametrize("side,expected", [(7, 196), (15, 820)])
def test_sd_table_rows(side, expected):
    op = PoissonOperator(side)
    _, tr = solve_sd(op, op.rhs(), 1e-7)
    assert abs(tr.iterations - expected) <= 0.02 * expected


def test_lsd_small_grid_within_factor_three():
    op = PoissonOperator(7)
    _, tr = solve_lsd(op, op.rhs(), 1e-7)
    assert 45 / 3 <= tr.iterations <= 45 * 3


def test_lsd_step_rule():
    op = PoissonOperator(9)
    b = op.rhs()
    _, tr = solve_lsd(op, b, 1e-6)
    # replay: alpha_k must equal the SD ratio of r_{k-1}, and alpha_0 the SD ratio of r_0
    u = np.zeros_like(b)
    r = b.copy()
    prev = None
    for k, alpha in enumerate(tr.step_history):
        Ar = op(r)
        sd = (r @ r) / (r @ Ar)
        assert alpha == pytest.approx(sd if k == 0 else prev, rel=1e-12)
        prev = sd
        u += alpha * r
        r = r - alpha * Ar


def test_lsd_max_step_near_plateau():
    op = PoissonOperator(15)
    _, tr = solve_lsd(op, op.rhs(), 1e-7)
    assert 0.025 <= max(tr.step_history) <= 0.1


def test_stopping_index_is_first_crossing():
    op = PoissonOperator(15)
    for name, solver in SOLVERS.items():
        _, tr = solver(op, op.rhs(), 1e-5)
        rel = tr.relative_residuals
        k = tr.iterations
        assert rel[k] <= 1e-5 and np.all(rel[:k] > 1e-5), name


def test_mr_residuals_monotone_and_recurrence_honest():
    op = PoissonOperator(15)
    b = op.rhs()
    u, tr = solve_mr(op, b, 1e-8)
    r = np.asarray(tr.residual_history)
    assert np.all(np.diff(r) <= 1e-12 * r[0])
    assert np.linalg.norm(b - op(u)) <= 1e-8 * np.linalg.norm(b) * 1.01


def test_breakdown_on_indefinite_operator():
    op = LinearOperator.from_matrix(np.diag([1.0, -1.0]))
    with pytest.raises(NumericalBreakdown):
        solve_cg(op, np.array([1.0, 1.0]), 1e-8)


def test_max_iter_flags_nonconvergence():
    op = PoissonOperator(15)
    _, tr = solve_sd(op, op.rhs(), 1e-7, max_iter=5)
    assert not tr.converged and tr.iterations == 5


def test_zero_rhs_converges_immediately():
    _, tr = solve_cg(PoissonOperator(3), np.zeros(9), 1e-7)
    assert tr.converged and tr.iterations == 0


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        solve_cg(PoissonOperator(3), np.ones(9), 0.0)
    with pytest.raises(ValueError):
        solve_cg(PoissonOperator(3), np.ones(8), 1e-3)
    with pytest.raises(ValueError):
        PoissonOperator(0)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 12), seed=st.integers(0, 10_000))
def test_cg_and_mr_solve_random_spd(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    A = M @ M.T + n * np.eye(n)
    b = rng.standard_normal(n)
    x = np.linalg.solve(A, b)
    for solver in (solve_cg, solve_mr):
        u, tr = solver(LinearOperator.from_matrix(A), b, 1e-10, max_iter=10 * n)
        assert tr.converged
        np.testing.assert_allclose(u, x, rtol=1e-6, atol=1e-8)


def test_benchmark_rows_and_looser_tolerance():
    tight = poisson_benchmark([7, 15], 1e-7)
    loose = poisson_benchmark([7, 15], 1e-3)
    assert [r["method"] for r in tight[:4]] == ["MR", "CG", "SD", "LSD"]
    for a, b in zip(tight, loose):
        assert b["iterations"] < a["iterations"]
        assert a["converged"]


def test_slopes_small_sizes():
    rows = poisson_benchmark([7, 15, 31, 63], 1e-7, methods=("CG", "MR"))
    for m in ("CG", "MR"):
        r = [x for x in rows if x["method"] == m]
        assert 0.4 <= loglog_slope([x["s"] for x in r], [x["iterations"] for x in r]) <= 0.6
