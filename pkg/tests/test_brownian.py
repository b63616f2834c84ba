import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ndesolve.brownian import (
    BrownianInterval,
    BrownianPath,
    Seed,
    VirtualBrownianTree,
    bridge_interval,
    bridge_point,
    make_source,
    split_seed,
)
from ndesolve.errors import ConfigurationError, ContractError

N = 100_000


def _mean_var_ok(x, mean, var):
    se_mean = np.sqrt(var / x.size)
    se_var = var * np.sqrt(2.0 / (x.size - 1))
    return abs(x.mean() - mean) <= 4 * se_mean and abs(x.var(ddof=1) - var) <= 4 * se_var


def test_split_deterministic_and_distinct():
    s = Seed.from_int(42)
    a, b = split_seed(s, 3), split_seed(s, 3)
    assert a == b
    assert len({c.key for c in a}) == 3
    assert split_seed(Seed.from_int(43), 3)[0] != a[0]


def test_sibling_streams_uncorrelated():
    a, b = Seed.from_int(1).split(2)
    x = a.generator().standard_normal(N)
    y = b.generator().standard_normal(N)
    assert abs(np.corrcoef(x, y)[0, 1]) <= 0.02


def test_small_normals_are_standard():
    vals = np.array([Seed(k).normal() for k in range(20_000)])
    assert _mean_var_ok(vals, 0.0, 1.0)


def test_bridge_point_plug_in_statistics():
    w = bridge_point(0.0, 0.5, 1.0, np.zeros(N), np.ones(N), Seed.from_int(3))
    assert _mean_var_ok(w, 0.5, 0.25)


def test_bridge_point_endpoint_limit():
    w = bridge_point(0.0, 1e-14, 1.0, 0.0, 1.0, Seed.from_int(3))
    assert abs(w) < 1e-6


def test_bridge_point_degenerate():
    with pytest.raises(ContractError):
        bridge_point(1.0, 1.0, 1.0, 0.0, 0.0, Seed.from_int(0))


def test_bridge_interval_statistics_and_additivity():
    w_su = np.zeros(N)
    w_st, w_tu = bridge_interval(0.0, 1.0, 2.0, w_su, Seed.from_int(8))
    assert _mean_var_ok(w_st, 0.0, 0.5)
    w_su = np.random.default_rng(0).standard_normal(5)
    w_st, w_tu = bridge_interval(0.2, 0.3, 0.9, w_su, Seed.from_int(1))
    assert np.array_equal(w_st + w_tu, w_st + (w_su - w_st))
    assert np.allclose(w_st + w_tu, w_su, rtol=0, atol=1e-15)
    zero, rest = bridge_interval(0.2, 0.2, 0.9, w_su, Seed.from_int(1))
    assert np.all(zero == 0)


@pytest.mark.parametrize("kind", ["path", "tree", "interval"])
def test_source_distribution(kind):
    src = make_source(kind, t0=0.0, t1=2.0, shape=(N,), seed=5)
    w = src.increment(0.3, 1.1)
    assert _mean_var_ok(w, 0.0, 0.8)


@pytest.mark.parametrize("kind", ["path", "tree", "interval"])
def test_source_requery_identical(kind):
    src = make_source(kind, t0=0.0, t1=1.0, shape=(3,), seed=2)
    a = src.increment(0.25, 0.6)
    src.increment(0.1, 0.9)
    assert np.array_equal(a, src.increment(0.25, 0.6))


def test_unknown_source_lists_options():
    with pytest.raises(ConfigurationError, match="interval"):
        make_source("levy")


def test_path_queries():
    bp = BrownianPath(0.0, 1.0, shape=(2,), seed=1)
    assert np.all(bp.increment(0.4, 0.4) == 0)
    full = bp.increment(0.0, 1.0)
    assert np.allclose(bp.increment(0.0, 0.5) + bp.increment(0.5, 1.0), full, atol=1e-15)
    with pytest.raises(ContractError):
        bp.increment(0.5, 1.5)


def test_tree_origin_and_snapping():
    vbt = VirtualBrownianTree(0.0, 1.0, shape=(2,), seed=3, tol=1e-2)
    assert np.all(vbt.value(0.0) == 0)
    assert np.array_equal(vbt.value(0.501), vbt.value(0.502))
    assert np.array_equal(vbt.value(0.3), vbt.value(0.3))


def test_tree_endpoints_exact_and_levels_logarithmic():
    vbt = VirtualBrownianTree(0.0, 1.0, seed=3, tol=1e-6)
    vbt.value(0.123456789)
    assert vbt.n_levels <= 21


def test_interval_root_query():
    bi = BrownianInterval(0.0, 4.0, shape=(N,), seed=11)
    w = bi.increment(0.0, 4.0)
    assert bi.n_nodes() == 1
    assert _mean_var_ok(w, 0.0, 4.0)


def test_interval_additivity():
    bi = BrownianInterval(0.0, 1.0, shape=(3,), seed=4)
    total = bi.increment(0.0, 1.0)
    for t in [0.1, 0.37, 0.5, 0.999]:
        assert np.allclose(bi.increment(0.0, t) + bi.increment(t, 1.0), total, rtol=0, atol=1e-14)


def test_interval_rejects_empty_query():
    with pytest.raises(ContractError):
        BrownianInterval().increment(0.5, 0.5)


def _queries(rng, k):
    pts = np.sort(rng.uniform(0, 1, size=2 * k))
    return [(pts[2 * i], pts[2 * i + 1]) for i in range(k)]


def test_interval_order_independence():
    rng = np.random.default_rng(0)
    qs = _queries(rng, 12)
    ref = BrownianInterval(seed=9, shape=(2,))
    vals = {q: ref.increment(*q) for q in qs}
    for perm in range(3):
        bi = BrownianInterval(seed=9, shape=(2,))
        for i in rng.permutation(len(qs)):
            assert np.allclose(bi.increment(*qs[i]), vals[qs[i]], rtol=0, atol=1e-13)


def test_interval_unrelated_queries_do_not_change_values():
    a = BrownianInterval(seed=9)
    b = BrownianInterval(seed=9)
    b.increment(0.05, 0.2)
    b.increment(0.7, 0.71)
    assert a.increment(0.3, 0.6) == pytest.approx(b.increment(0.3, 0.6), abs=1e-13)


def test_interval_cache_eviction_transparent():
    bi = BrownianInterval(seed=3, shape=(2,), cache_size=4)
    grid = np.arange(65) / 64
    first = [bi.increment(a, b) for a, b in zip(grid[:-1], grid[1:])]
    bi.clear_cache()
    again = [bi.increment(a, b) for a, b in zip(grid[:-1], grid[1:])]
    assert all(np.array_equal(x, y) for x, y in zip(first, again))


def test_prebuild_stump_and_value_transparency():
    bi = BrownianInterval(seed=1)
    bi.prebuild_dyadic(avg_step=0.1, cache_capacity=20)
    assert bi.n_nodes() == 1
    grid = np.arange(33) / 32
    plain = BrownianInterval(seed=1, shape=(2,))
    built = BrownianInterval(seed=1, shape=(2,))
    built.prebuild_dyadic(avg_step=1 / 32, cache_capacity=4)
    assert built.n_nodes() > 1
    for a, b in zip(grid[:-1], grid[1:]):
        assert np.allclose(plain.increment(a, b), built.increment(a, b), rtol=0, atol=1e-14)


def test_prebuild_reduces_backward_sweep_work():
    n = 2000

    def backward_cost(prebuild):
        bi = BrownianInterval(seed=0, split="query")
        if prebuild:
            bi.prebuild_dyadic(1.0 / n)
        grid = np.arange(n + 1) / n
        for k in range(n):
            bi.increment(grid[k], grid[k + 1])
        before = bi.stats["bridge_samples"]
        for k in reversed(range(n)):
            bi.increment(grid[k], grid[k + 1])
        return bi.stats["bridge_samples"] - before

    assert backward_cost(True) * 5 <= backward_cost(False)


def test_query_mode_is_history_dependent():
    a = BrownianInterval(seed=5, split="query")
    b = BrownianInterval(seed=5, split="query")
    b.increment(0.0, 0.3)
    assert a.increment(0.0, 0.6) != b.increment(0.0, 0.6)


@settings(max_examples=20, deadline=None)
@given(s=st.floats(0, 0.98), width=st.floats(0.01, 1.0), seed=st.integers(0, 1000))
def test_interval_query_in_range_and_reproducible(s, width, seed):
    t = min(1.0, s + width)
    a = BrownianInterval(seed=seed).increment(s, t)
    b = BrownianInterval(seed=seed).increment(s, t)
    assert a == b and np.isfinite(a)
