import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probstop.randprobe import (
    Distribution,
    ProbeStream,
    derive_seed,
    draw_probe,
    draw_probes,
    second_moment_check,
)

seeds = st.integers(min_value=0, max_value=2**64 - 1)


def test_rademacher_support():
    w = draw_probe(ProbeStream("rademacher", 4, 12345), 0)
    assert set(w.tolist()) <= {1.0, -1.0}


def test_gaussian_draw_is_deterministic():
    st_ = ProbeStream(Distribution.GAUSSIAN, 1, 7)
    assert draw_probe(st_, 3)[0] == draw_probe(st_, 3)[0]


def test_zero_dimension_rejected():
    with pytest.raises(ValueError):
        ProbeStream("gaussian", 0, 1)


def test_unknown_distribution_rejected():
    with pytest.raises(ValueError, match="unknown probe distribution"):
        Distribution.parse("uniform")


@settings(max_examples=40, deadline=None)
@given(seed=seeds, s=st.integers(1, 12), start=st.integers(0, 50), count=st.integers(1, 20),
       dist=st.sampled_from(list(Distribution)))
def test_blocks_match_single_draws(seed, s, start, count, dist):
    stream = ProbeStream(dist, s, seed)
    block = draw_probes(stream, start, count)
    singles = np.column_stack([draw_probe(stream, start + k) for k in range(count)])
    assert np.array_equal(block, singles)


@settings(max_examples=30, deadline=None)
@given(seed=seeds, first=st.integers(0, 100), j=st.integers(0, 100))
def test_first_index_shifts_counter(seed, first, j):
    a = draw_probe(ProbeStream("gaussian", 5, seed, first_index=first), j)
    b = draw_probe(ProbeStream("gaussian", 5, seed), first + j)
    assert np.array_equal(a, b)


def test_probe_j_independent_of_generation_order():
    stream = ProbeStream("gaussian", 6, 99)
    forward = draw_probes(stream, 0, 32)
    backward = np.column_stack([draw_probe(stream, j) for j in reversed(range(32))])[:, ::-1]
    assert np.array_equal(forward, backward)


def test_dimension_prefix_is_stable():
    # component i of probe j does not depend on s
    a = draw_probes(ProbeStream("gaussian", 3, 5), 0, 10)
    b = draw_probes(ProbeStream("gaussian", 8, 5), 0, 10)
    assert np.array_equal(a, b[:3])


def test_distinct_seeds_give_distinct_streams():
    a = draw_probes(ProbeStream("gaussian", 4, 1), 0, 4)
    b = draw_probes(ProbeStream("gaussian", 4, 2), 0, 4)
    assert not np.allclose(a, b)


def test_derive_seed_labels_separate():
    vals = {derive_seed(0, p, k) for p in range(4) for k in range(50)}
    assert len(vals) == 200
    assert derive_seed(3, 1, 2) == derive_seed(3, 1, 2)
    assert derive_seed(3, 1, 2) != derive_seed(3, 2, 1)


def test_gaussian_outer_product_moment():
    W = draw_probes(ProbeStream("gaussian", 8, 2024), 0, 100_000)
    M = W @ W.T / W.shape[1]
    assert np.max(np.abs(M - np.eye(8))) < 0.05


def test_gaussian_marginal_moments():
    x = draw_probes(ProbeStream("gaussian", 1, 3), 0, 400_000)[0]
    se = 1 / np.sqrt(x.size)
    assert abs(x.mean()) < 4 * se
    assert abs(x.var() - 1) < 4 * np.sqrt(2) * se
    assert abs(np.mean(x**4) - 3) < 0.05
    assert abs(np.mean(x > 1.0) - 0.158655) < 0.003


def test_rademacher_diagonal_exact():
    W = draw_probes(ProbeStream("rademacher", 3, 11), 0, 17)
    assert np.array_equal(np.diag(W @ W.T) / 17, np.ones(3))


@pytest.mark.parametrize("dist", ["gaussian", "rademacher"])
def test_second_moment_check_large_sample(dist):
    assert second_moment_check(dist, 2, 1_000_000, seed=4) < 0.01


def test_second_moment_check_rejects_empty():
    with pytest.raises(ValueError):
        second_moment_check("gaussian", 2, 0)


@pytest.mark.parametrize("dist", ["gaussian", "rademacher"])
def test_squared_norm_mean(dist):
    s, n = 10, 20_000
    W = draw_probes(ProbeStream(dist, s, 8), 0, n)
    sq = np.sum(W * W, axis=0)
    if dist == "rademacher":
        assert np.all(sq == s)
    else:
        assert abs(sq.mean() - s) <= 3 * sq.std() / np.sqrt(n)
