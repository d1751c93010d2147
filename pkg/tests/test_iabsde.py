import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anticip_smp.errors import EstimatorMismatch, NoConvergence
from anticip_smp.estimators import Deterministic, PolyRegression
from anticip_smp.gridrng import PathEnsemble, brownian_increments, make_grid
from anticip_smp.iabsde import (
    BackwardProblem,
    apriori_estimate_check,
    backward_euler_pass,
    initial_guess,
    picard_solve,
    sample_terminal,
)
from anticip_smp.kernels import MeasureSpec, discretize_measure

from families import random_linear_bsde


def _const(c):
    return lambda t, y, ya, z, za, v, vd: c + 0 * y


def test_unit_generator_gives_time_to_go():
    g = make_grid(1.0, 25)
    prob = BackwardProblem(_const(1.0))
    sol, sweeps, hist = picard_solve(prob, g)
    np.testing.assert_allclose(sol.Y.values[0, g.zero : g.end + 1], 1.0 - g.times[g.zero : g.end + 1], atol=1e-14)
    np.testing.assert_array_equal(sol.Z.values, 0.0)
    assert sweeps <= 2
    lhs, rhs, ratio = apriori_estimate_check(prob, sol, g)
    assert lhs == pytest.approx(1.0, rel=1e-12)
    assert rhs == pytest.approx(1.0, rel=1e-12)


def test_linear_generator_matches_explicit_recursion():
    g = make_grid(1.0, 40)
    prob = BackwardProblem(lambda t, y, ya, z, za, v, vd: -0.7 * y, xi=2.0)
    sol, _, _ = picard_solve(prob, g)
    assert sol.Y.values[0, g.zero] == pytest.approx(2.0 * (1 - 0.7 * g.h) ** 40, rel=1e-13)


def test_anticipated_generator_matches_recursion():
    delta, b = 0.2, 0.8
    g = make_grid(1.0, 50, history_span=delta, future_span=delta)
    k = discretize_measure(MeasureSpec.dirac(delta), g)
    prob = BackwardProblem(lambda t, y, ya, z, za, v, vd: b * ya, xi=lambda t, w: 1.0 + t, kernel_y=k)
    sol, _, _ = picard_solve(prob, g, tol=1e-14)
    m = g.lag_index(delta)
    Y = np.zeros(g.n_nodes)
    Y[g.end :] = 1.0 + g.times[g.end :]
    for i in range(g.end - 1, g.zero - 1, -1):
        Y[i] = Y[i + 1] + g.h * b * Y[i + m]
    np.testing.assert_allclose(sol.Y.values[0, g.zero :], Y[g.zero :], rtol=1e-12)


def test_control_enters_through_value_and_delay():
    g = make_grid(1.0, 20, history_span=0.25, future_span=0.25)
    kv = discretize_measure(MeasureSpec.uniform(0.25), g)
    v = PathEnsemble(g, np.full(g.n_nodes, 2.0))
    prob = BackwardProblem(lambda t, y, ya, z, za, v, vd: v + vd, kernel_v=kv, control=v)
    sol, _, _ = picard_solve(prob, g)
    # v + K_d v = 2 + 2 * 0.25 on every node
    assert sol.Y.values[0, g.zero] == pytest.approx(2.5, rel=1e-13)


def test_brownian_terminal_gives_unit_z():
    g = make_grid(1.0, 20)
    incs = brownian_increments(g, 5000, seed=1)
    prob = BackwardProblem(_const(0.0), xi=lambda t, w: w)
    sol, _, _ = picard_solve(prob, g, incs, PolyRegression(1))
    W = incs.brownian
    # exact up to the sampling error of the regression coefficients
    assert np.sqrt(np.mean((sol.Y.values[:, g.zero : g.end + 1] - W) ** 2)) < 0.02
    assert abs(sol.Z.values[:, g.control_nodes].mean() - 1.0) < 0.05


def test_deterministic_estimator_rejects_noisy_terminal():
    g = make_grid(1.0, 10)
    incs = brownian_increments(g, 50, seed=0)
    prob = BackwardProblem(_const(0.0), xi=lambda t, w: w)
    with pytest.raises(EstimatorMismatch):
        picard_solve(prob, g, incs, Deterministic())


def test_no_convergence_carries_history():
    prob, g, incs = random_linear_bsde(3, n_steps=20, n_paths=200)
    with pytest.raises(NoConvergence) as info:
        picard_solve(prob, g, incs, PolyRegression(2), tol=1e-12, max_iter=2)
    assert len(info.value.residual_history) == 2
    with pytest.raises(ValueError):
        picard_solve(prob, g, incs, PolyRegression(2), tol=0.0)


def test_increment_count_checked():
    g = make_grid(1.0, 10)
    prob = BackwardProblem(_const(0.0))
    with pytest.raises(ValueError):
        picard_solve(prob, g, brownian_increments(make_grid(1.0, 20), 4, seed=0))


def test_terminal_sampling_shapes():
    t = np.array([1.0, 1.1, 1.2])
    w = np.array([0.5, -0.5])
    assert sample_terminal(2.0, t, w).shape == (2, 3)
    np.testing.assert_allclose(sample_terminal(lambda s, x: s + x, t, w)[1], t - 0.5)


def test_single_pass_from_initial_guess():
    prob, g, incs = random_linear_bsde(0, n_steps=20, n_paths=100)
    start = initial_guess(prob, g, incs)
    out = backward_euler_pass(prob, g, incs, start.Y, start.Z, PolyRegression(2))
    assert out.Ya.shape == (100, 20) and out.Za.shape == (100, 20)
    np.testing.assert_array_equal(out.Y.values[:, g.end :], start.Y.values[:, g.end :])


@settings(max_examples=8)
@given(st.integers(0, 10_000))
def test_picard_contracts_on_random_linear_family(seed):
    prob, g, incs = random_linear_bsde(seed, n_steps=20, n_paths=200)
    _, sweeps, hist = picard_solve(prob, g, incs, PolyRegression(2), tol=1e-10, max_iter=60)
    assert hist[-1] < 1e-10
    ratios = np.array(hist[1:]) / np.array(hist[:-1])
    assert np.all(ratios[:3] < 1.0)
