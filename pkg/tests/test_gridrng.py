import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anticip_smp.errors import LagMisaligned
from anticip_smp.gridrng import (
    PathEnsemble,
    brownian_increments,
    extend_with_history,
    make_grid,
    worker_count,
)


def test_grid_with_aligned_lag():
    g = make_grid(1.0, 10, lags=[0.3], history_span=0.3, future_span=0.3)
    assert g.h == pytest.approx(0.1)
    assert g.lag_indices == (3,)
    assert g.lag_index(0.3) == 3
    assert g.history_nodes == 3 and g.future_nodes == 3


def test_misaligned_lag_rejected():
    with pytest.raises(LagMisaligned):
        make_grid(1.0, 10, lags=[0.25])


def test_plain_grid_nodes():
    g = make_grid(2.0, 20)
    assert g.n_nodes == 21
    np.testing.assert_allclose(g.times, 0.1 * np.arange(21), atol=1e-15)
    assert g.T == 2.0


@pytest.mark.parametrize("bad", [dict(T=0.0, n_steps=10), dict(T=1.0, n_steps=0), dict(T=1.0, n_steps=2.5)])
def test_invalid_grid_arguments(bad):
    with pytest.raises(ValueError):
        make_grid(**bad)


def test_extensions_widen_to_cover_lags():
    g = make_grid(1.0, 10, lags=[0.5])
    assert g.history_nodes >= 5 and g.future_nodes >= 5


@given(st.integers(1, 50), st.integers(0, 10), st.integers(0, 10))
def test_grid_closure(n, k_hist, k_fut):
    g = make_grid(1.0, n, history_span=k_hist / n, future_span=k_fut / n)
    assert g.history_nodes == k_hist and g.future_nodes == k_fut
    assert g.times[g.zero] == 0.0
    assert g.times[g.end] == pytest.approx(1.0)
    for i in range(g.n_nodes):
        assert g.node(g.time(i)) == i


def test_increments_are_pure_functions_of_seed_path_step():
    g = make_grid(1.0, 50)
    a = brownian_increments(g, 7, seed=3)
    b = brownian_increments(g, 7, seed=3)
    np.testing.assert_array_equal(a.increments, b.increments)
    # a longer ensemble shares its leading paths and steps
    bigger = brownian_increments(g, 12, seed=3)
    np.testing.assert_array_equal(bigger.increments[:7], a.increments)
    longer = brownian_increments(make_grid(2.0, 100), 7, seed=3)
    np.testing.assert_array_equal(longer.increments[:, :50], a.increments)
    other = brownian_increments(g, 7, seed=4)
    assert not np.array_equal(other.increments, a.increments)


@pytest.mark.parametrize("workers", [1, 2, 5])
def test_worker_count_never_changes_bits(workers):
    g = make_grid(1.0, 40)
    ref = brownian_increments(g, 33, seed=11, workers=1)
    got = brownian_increments(g, 33, seed=11, workers=workers)
    np.testing.assert_array_equal(ref.increments, got.increments)


def test_thread_env_variable(monkeypatch):
    monkeypatch.setenv("ANTICIP_SMP_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("ANTICIP_SMP_THREADS", "0")
    assert worker_count() == 1
    assert worker_count(4) == 4


def test_increment_moments():
    g = make_grid(1.0, 100)
    incs = brownian_increments(g, 10_000, seed=42)
    h = g.h
    means = incs.increments.mean(axis=0)
    assert np.all(np.abs(means) <= 4 * math.sqrt(h / 10_000))
    var = incs.increments.var(axis=0, ddof=1)
    assert np.all(np.abs(var - h) <= 0.1 * h)


def test_brownian_and_coarsening():
    g = make_grid(1.0, 8)
    incs = brownian_increments(g, 5, seed=1)
    W = incs.brownian
    assert W.shape == (5, 9)
    np.testing.assert_array_equal(W[:, 0], 0.0)
    np.testing.assert_allclose(np.diff(W, axis=1), incs.increments, atol=1e-15)
    coarse = incs.coarsen(2)
    assert coarse.h == pytest.approx(0.25)
    np.testing.assert_allclose(coarse.brownian, W[:, ::2], atol=1e-14)
    with pytest.raises(ValueError):
        incs.coarsen(3)


def test_path_ensemble_shape_checks():
    g = make_grid(1.0, 4, history_span=0.5)
    e = PathEnsemble(g, np.arange(g.n_nodes, dtype=float))
    assert e.values.shape == (1, g.n_nodes)
    assert e.is_deterministic()
    np.testing.assert_array_equal(e.interior[0], np.arange(g.zero, g.end + 1))
    with pytest.raises(ValueError):
        PathEnsemble(g, np.zeros(3))


def test_extend_with_history():
    g = make_grid(1.0, 10, history_span=0.3, future_span=0.3)
    base = PathEnsemble.from_function(g, lambda t: 5.0 + 0 * t, n_paths=2)
    zero = extend_with_history(base, lambda t: np.zeros_like(t), which="history")
    np.testing.assert_array_equal(zero.values[:, : g.zero], 0.0)
    np.testing.assert_array_equal(zero.values[:, g.zero :], 5.0)

    const = extend_with_history(base, lambda t: np.full_like(t, 2.5), which="future")
    np.testing.assert_array_equal(const.values[:, g.end + 1 :], 2.5)
    np.testing.assert_array_equal(const.values[:, : g.end + 1], 5.0)

    exp = extend_with_history(base, np.exp, which="history")
    assert exp.values[0, g.history_nodes - 2] == pytest.approx(math.exp(-0.2), rel=1e-14)
    with pytest.raises(ValueError):
        extend_with_history(base, np.exp, which="sideways")
