import math

import numpy as np
import pytest

from anticip_smp.errors import SignAssumptionViolated
from anticip_smp.examples import (
    ClimateParams,
    ConsumptionParams,
    LqParams,
    build_example,
    climate_adjoint_oracle,
    consumption_problem,
)
from anticip_smp.gridrng import PathEnsemble, brownian_increments
from anticip_smp.smp import control_path, cost_functional


def _ctrl(case):
    g = case.problem.grid
    return g, g.control_nodes, g.times[g.control_nodes]


def test_consumption_optimum_value_at_one():
    case = consumption_problem(ConsumptionParams(T=2.0), n_steps=200)
    g, ctrl, t = _ctrl(case)
    u = case.optimal_control().values[0]
    assert u[g.node(1.0)] == pytest.approx(0.41997434161402614, rel=1e-13)
    np.testing.assert_allclose(u[ctrl], np.cosh(t) ** -2, rtol=1e-13)


def test_consumption_without_feedback_is_flat():
    case = build_example("consumption", 50, b=0.0, rho=0.3)
    g, ctrl, _ = _ctrl(case)
    np.testing.assert_allclose(case.optimal_control().values[0, ctrl], 1.0, rtol=1e-15)


def test_consumption_cost_of_unit_consumption():
    # Y(0) = cosh(1) + sinh(1) = e and int -2 sqrt(c) = -2
    errs = []
    for n in (100, 200, 400):
        case = build_example("consumption", n)
        errs.append(cost_functional(case.problem, control_path(case.problem, 1.0)) - (math.e - 2))
    assert abs(errs[0]) < 0.02
    assert 1.8 < errs[0] / errs[1] < 2.2 and 1.8 < errs[1] / errs[2] < 2.2


@pytest.mark.parametrize("bad", [dict(rho=1.0), dict(rho=0.0), dict(a=0.0), dict(b=-1.0), dict(T=0.0)])
def test_consumption_params_validated(bad):
    with pytest.raises(ValueError):
        ConsumptionParams(**bad)


def test_climate_oracle_without_feedback():
    np.testing.assert_array_equal(climate_adjoint_oracle(0.0, 2.0, np.linspace(0, 1, 11)), -1.0)


def test_climate_oracle_solves_delay_ode():
    # p' = beta q, q' = p - lam q with q(t) = int_0^t e^{-lam (t - s)} p(s) ds
    beta, lam = 0.3, 2.0
    t = np.linspace(0, 1, 2001)
    p = climate_adjoint_oracle(beta, lam, t)
    h = t[1] - t[0]
    q = np.array([np.trapezoid(np.exp(-lam * (s - t[: k + 1])) * p[: k + 1], dx=h) for k, s in enumerate(t)])
    dp = np.gradient(p, h)
    assert np.abs(dp - beta * q)[1:-1].max() < 1e-5


def test_climate_without_feedback_hold_extension():
    case = build_example("climate", 200, beta=0.0, extension="hold")
    g, ctrl, t = _ctrl(case)
    kv = case.problem.kernel_v
    h, mu, K = g.h, 1.5, kv.lags.size
    Pi = -h * (1 - math.exp(-mu * h * K)) / (1 - math.exp(-mu * h))
    expected = np.log(0.8 * -Pi / (1 + 0.5 * t)) / 2.0
    np.testing.assert_allclose(case.optimal_control().values[0, ctrl], expected, rtol=1e-13, atol=1e-14)
    # the held tail is the truncated geometric weight of the kernel
    assert -Pi == pytest.approx((1 - math.exp(-mu * h * K)) / mu, rel=h)


def test_climate_zero_extension_shrinks_average_near_horizon():
    zero = build_example("climate", 100, extension="zero").optimal_control().values[0]
    hold = build_example("climate", 100, extension="hold").optimal_control().values[0]
    g = build_example("climate", 100).problem.grid
    ctrl = g.control_nodes
    assert np.all(zero[ctrl] <= hold[ctrl] + 1e-15)
    assert zero[ctrl[-1]] < hold[ctrl[-1]] - 0.5


def test_climate_sign_assumption_enforced():
    case = build_example("climate", 50)
    g = case.problem.grid
    with pytest.raises(SignAssumptionViolated):
        case.control_from_adjoint(PathEnsemble(g, np.ones(g.n_nodes)))


def test_climate_params_validated():
    with pytest.raises(ValueError):
        ClimateParams(mu=0.0)
    with pytest.raises(ValueError):
        ClimateParams(beta=-0.1)


def test_lq_without_delay_terms():
    case = build_example("lq", 100, B=0.0, C=0.0, D=0.0, F=0.0, E=1.5, L=2.0)
    g, ctrl, t = _ctrl(case)
    p = case.adjoint_oracle().values[0]
    phi = np.exp(0.1 * g.h * np.arange(ctrl.size))
    np.testing.assert_allclose(p[ctrl], -phi, rtol=1e-13)
    # the delayed-control penalty stays in the denominator while the indicator is on
    live = ctrl + g.lag_index(0.25) < g.end
    den = np.where(live, 2.0 + 0.5, 2.0)
    np.testing.assert_allclose(case.optimal_control().values[0, ctrl], 1.5 * -phi / den, rtol=1e-13)


def test_lq_deterministic_formula_and_indicator():
    case = build_example("lq", 100, C=0.0, D=0.0)
    g, ctrl, _ = _ctrl(case)
    m = g.lag_index(0.25)
    p = case.adjoint_oracle().values[0]
    u = case.optimal_control().values[0]
    for i in ctrl:
        if i + m < g.end:
            assert u[i] == pytest.approx((p[i] + 0.5 * p[i + m]) / 1.5, rel=1e-13)
        else:
            assert u[i] == pytest.approx(p[i], rel=1e-13)


def test_lq_stochastic_control_is_per_path():
    case = build_example("lq", 40)
    assert case.stochastic and not LqParams().deterministic and LqParams(C=0.0, D=0.0).deterministic
    g = case.problem.grid
    incs = brownian_increments(g, 300, seed=2)
    u = case.optimal_control(incs)
    assert u.n_paths == 300
    assert np.std(u.values[:, g.control_nodes[-1]]) > 0


def test_lq_params_validated():
    with pytest.raises(ValueError):
        LqParams(L=lambda t: 1.0 - 2 * np.asarray(t))
    with pytest.raises(ValueError):
        LqParams(delta=0.0)


def test_unknown_example():
    with pytest.raises(KeyError):
        build_example("pension", 10)
