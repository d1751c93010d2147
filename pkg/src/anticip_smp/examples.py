"""Three solvable control problems with closed-form optima.

* ``climate``: exponential anticipation of a social-cost index, an
  exponentially delayed policy and an exponential policy cost.
* ``consumption``: recursive utility driven by ``E[int_t^T Y dr | F_t]``
  with power utility of consumption.
* ``lq``: point-delay linear-quadratic problem with anticipated state and
  delayed control.

Each constructor returns an :class:`ExampleCase` bundling the control
problem, its optimal control, an independent oracle for the adjoint and a
scale constant for grid-dependent tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import expm

from .errors import SignAssumptionViolated
from .estimators import ConditionalEstimator, Deterministic, PolyRegression
from .gridrng import IncrementEnsemble, PathEnsemble, make_grid
from .isdde import as_function, consumption_adjoint_closed_form, lq_adjoint_segments
from .kernels import MeasureSpec, anticipate_all, anticipate_all_raw, discretize_measure
from .smp import ControlProblem, Smooth, control_path

__all__ = [
    "ClimateParams",
    "ConsumptionParams",
    "LqParams",
    "ExampleCase",
    "climate_problem",
    "consumption_problem",
    "lq_problem",
    "climate_adjoint_oracle",
    "EXAMPLES",
    "build_example",
]

Coef = Union[float, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class ExampleCase:
    """A control problem with its optimum and adjoint oracle.

    ``adjoint_oracle(incs)`` returns the independently computed adjoint
    and ``control_from_adjoint(p, incs, estimator)`` the closed-form
    optimal control built from any adjoint ``p``; the optimum itself uses
    the oracle. Deterministic examples ignore ``incs``. ``scale`` is the
    size of the terms that make up the stationarity process at the optimum.
    """

    problem: ControlProblem
    control_from_adjoint: Callable = field(repr=False)
    adjoint_oracle: Callable = field(repr=False)
    scale: float
    stochastic: bool = False
    params: object = None

    def optimal_control(self, incs=None, estimator=None) -> PathEnsemble:
        return self.control_from_adjoint(self.adjoint_oracle(incs), incs, estimator)

    def estimator(self, incs: Optional[IncrementEnsemble] = None) -> ConditionalEstimator:
        if self.stochastic and incs is not None:
            return PolyRegression(2)
        return Deterministic()


# --------------------------------------------------------------------- climate


@dataclass(frozen=True)
class ClimateParams:
    kappa: float = 0.5
    beta: float = 0.3
    eta: float = 0.8
    lam: float = 2.0
    mu: float = 1.5
    theta: float = 2.0
    R: Coef = lambda t: 1.0 + 0.5 * np.asarray(t, dtype=float)
    y_bar: float = 1.0
    T: float = 1.0
    u0: float = 0.0

    def __post_init__(self):
        for name in ("kappa", "eta", "lam", "mu", "theta", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        # beta = 0 switches the feedback off and keeps p constant
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta!r}")


def climate_adjoint_oracle(beta: float, lam: float, times: np.ndarray) -> np.ndarray:
    """Exact ``p`` of ``dp = beta int_0^inf e^{-lam s} p(t-s) ds dt``, ``p(0) = -1``.

    With ``q(t) = int_0^t e^{-lam (t-s)} p(s) ds`` the pair solves the
    linear system ``p' = beta q``, ``q' = p - lam q``. ``times`` must be an
    increasing uniform sequence starting at 0.
    """
    times = np.asarray(times, dtype=float)
    out = np.empty(times.size)
    if times.size == 0:
        return out
    M = np.array([[0.0, beta], [1.0, -lam]])
    step = expm(M * (times[1] - times[0])) if times.size > 1 else np.eye(2)
    state = np.array([-1.0, 0.0])
    for k in range(times.size):
        out[k] = state[0]
        state = step @ state
    return out


def climate_problem(
    params: Optional[ClimateParams] = None,
    n_steps: int = 200,
    tail_tol: float = 1e-8,
    extension: str = "zero",
) -> ExampleCase:
    """Climate policy problem.

    ``extension`` fixes the adjoint after ``T`` inside the forward
    average of ``H_vd``: ``"zero"`` (the exact gradient of the discrete
    cost) or ``"hold"`` (``p`` frozen at ``p(T)``).
    """
    P = params or ClimateParams()
    ky_spec = MeasureSpec.exponential(P.lam, tail_tol)
    kv_spec = MeasureSpec.exponential(P.mu, tail_tol)
    span = max(ky_spec.truncation_span, kv_spec.truncation_span)
    grid = make_grid(P.T, n_steps, history_span=span, future_span=span)
    ky, kv = discretize_measure(ky_spec, grid), discretize_measure(kv_spec, grid)
    R = as_function(P.R)
    th, eta = P.theta, P.eta

    f = Smooth(
        value=lambda t, y, ya, z, za, v, vd: P.kappa + P.beta * ya - eta * vd,
        d_ya=lambda t, y, ya, z, za, v, vd: np.full(np.shape(ya), P.beta),
        d_vd=lambda t, y, ya, z, za, v, vd: np.full(np.shape(vd), -eta),
    )
    l = Smooth(
        value=lambda t, y, ya, z, za, v, vd: R(t) / th * np.exp(th * v),
        d_v=lambda t, y, ya, z, za, v, vd: R(t) * np.exp(th * v),
    )
    problem = ControlProblem(
        grid=grid,
        f=f,
        l=l,
        kernel_y=ky,
        kernel_v=kv,
        control_history=lambda t: np.full(np.shape(t), P.u0),
        xi=P.y_bar,
        eta=0.0,
        convex=True,
        vd_extension=extension,
        name="climate",
    )

    t = grid.times
    p_row = np.zeros(grid.n_nodes)
    p_row[grid.zero : grid.end + 1] = climate_adjoint_oracle(P.beta, P.lam, t[grid.zero : grid.end + 1])
    p_row[grid.end + 1 :] = p_row[grid.end]
    oracle = PathEnsemble(grid, p_row)

    ctrl = grid.control_nodes

    def forward_average(p: PathEnsemble) -> np.ndarray:
        ext = p.values.copy()
        if extension == "zero":
            ext[:, grid.end :] = 0.0
        else:
            ext[:, grid.end :] = ext[:, grid.end : grid.end + 1]
        return anticipate_all_raw(kv, ext, ctrl, grid)

    def from_adjoint(p, incs=None, estimator=None):
        Pi = forward_average(p)
        if np.any(Pi >= 0):
            bad = ctrl[np.argmax(np.any(Pi >= 0, axis=0))]
            raise SignAssumptionViolated(f"Pi(t) >= 0 at t={grid.time(bad):.6g}; the log-policy is undefined")
        return control_path(problem, np.log(-eta * Pi / R(t[ctrl])) / th)

    scale = float(np.max(np.abs(eta * forward_average(oracle))))
    return ExampleCase(
        problem=problem,
        control_from_adjoint=from_adjoint,
        adjoint_oracle=lambda incs=None: oracle,
        scale=scale,
        params=P,
    )


# ----------------------------------------------------------------- consumption


@dataclass(frozen=True)
class ConsumptionParams:
    a: float = 1.0
    b: float = 1.0
    rho: float = 0.5
    xi: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"a must be positive, got {self.a!r}")
        if self.b < 0:
            raise ValueError(f"b must be nonnegative, got {self.b!r}")
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho!r}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T!r}")


def consumption_problem(params: Optional[ConsumptionParams] = None, n_steps: int = 500) -> ExampleCase:
    """Consumption with recursive utility; ``c*(t) = (a cosh(sqrt(b) t))^(-1/rho)``.

    The forward average ``int_t^T Y dr`` is a uniform kernel of width ``T``
    cut off at ``T``.
    """
    P = params or ConsumptionParams()
    a, b, rho = P.a, P.b, P.rho
    grid = make_grid(P.T, n_steps, history_span=P.T, future_span=P.T)
    ky = discretize_measure(MeasureSpec.uniform(P.T, cutoff=P.T), grid)

    def utility(c):
        return np.maximum(c, 0.0) ** (1 - rho) / (1 - rho)

    f = Smooth(
        value=lambda t, y, ya, z, za, v, vd: a * v + b * ya,
        d_ya=lambda t, y, ya, z, za, v, vd: np.full(np.shape(ya), b),
        d_v=lambda t, y, ya, z, za, v, vd: np.full(np.shape(v), a),
    )
    l = Smooth(
        value=lambda t, y, ya, z, za, v, vd: -utility(v),
        d_v=lambda t, y, ya, z, za, v, vd: -np.maximum(v, 0.0) ** (-rho),
    )
    problem = ControlProblem(
        grid=grid,
        f=f,
        l=l,
        kernel_y=ky,
        u_lo=0.0,
        xi=P.xi,
        convex=True,
        name="consumption",
    )
    oracle = consumption_adjoint_closed_form(b, grid)
    ctrl = grid.control_nodes

    def from_adjoint(p, incs=None, estimator=None):
        return control_path(problem, (-a * p.values[:, ctrl]) ** (-1.0 / rho))

    return ExampleCase(
        problem=problem,
        control_from_adjoint=from_adjoint,
        adjoint_oracle=lambda incs=None: oracle,
        scale=a * math.cosh(math.sqrt(b) * P.T),
        params=P,
    )


# -------------------------------------------------------------------------- lq


@dataclass(frozen=True)
class LqParams:
    A: Coef = 0.1
    B: Coef = 0.2
    C: Coef = 0.3
    D: Coef = 0.1
    E: Coef = 1.0
    F: Coef = 0.5
    L: Coef = 1.0
    L_tilde: Coef = 0.5
    delta: float = 0.25
    T: float = 1.0
    xi: object = 1.0
    eta: object = 0.0
    phi: Coef = 0.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta!r}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T!r}")
        probe = np.linspace(0.0, self.T + self.delta, 65)
        for name in ("L", "L_tilde"):
            if np.any(as_function(getattr(self, name))(probe) <= 0):
                raise ValueError(f"{name} must be positive on [0, T + delta]")

    @property
    def deterministic(self) -> bool:
        probe = np.linspace(0.0, self.T, 65)
        return all(np.all(as_function(c)(probe) == 0) for c in (self.C, self.D))


def lq_problem(params: Optional[LqParams] = None, n_steps: int = 100) -> ExampleCase:
    """Point-delay LQ problem.

    ``u*(t) = (E p + 1{t+d<T} F(t+d) E[p(t+d)|F_t]) / (L + 1{t+d<T} L~(t+d))``
    with ``p`` from the segment-wise closed form on the caller's increments.
    The indicator uses the grid's convention that ``H_vd`` vanishes from
    node ``T`` on.
    """
    P = params or LqParams()
    A, B, C, D, E, F, L, Lt = (as_function(c) for c in (P.A, P.B, P.C, P.D, P.E, P.F, P.L, P.L_tilde))
    phi = as_function(P.phi)
    grid = make_grid(P.T, n_steps, lags=[P.delta])
    kernel = discretize_measure(MeasureSpec.dirac(P.delta), grid)

    def full(fn):
        return lambda t, y, ya, z, za, v, vd: np.broadcast_to(fn(t), np.broadcast(y, t).shape)

    f = Smooth(
        value=lambda t, y, ya, z, za, v, vd: A(t) * y + B(t) * ya + C(t) * z + D(t) * za + E(t) * v + F(t) * vd,
        d_y=full(A),
        d_ya=full(B),
        d_z=full(C),
        d_za=full(D),
        d_v=full(E),
        d_vd=full(F),
    )
    l = Smooth(
        value=lambda t, y, ya, z, za, v, vd: 0.5 * (L(t) * v**2 + Lt(t) * vd**2),
        d_v=lambda t, y, ya, z, za, v, vd: L(t) * v,
        d_vd=lambda t, y, ya, z, za, v, vd: Lt(t) * vd,
    )
    problem = ControlProblem(
        grid=grid,
        f=f,
        l=l,
        kernel_y=kernel,
        kernel_z=kernel,
        kernel_v=kernel,
        control_history=phi,
        xi=P.xi,
        eta=P.eta,
        convex=True,
        name="lq",
    )
    stochastic = not P.deterministic

    def oracle(incs=None):
        return lq_adjoint_segments(P.A, P.B, P.C, P.D, P.delta, grid, incs if stochastic else None)

    m = grid.lag_index(P.delta)
    ctrl = grid.control_nodes
    t = grid.times[ctrl]
    live = (ctrl + m < grid.end).astype(float)

    def from_adjoint(p, incs=None, estimator=None):
        if estimator is None:
            estimator = PolyRegression(2) if (stochastic and incs is not None) else Deterministic()
        W = None if incs is None else incs.brownian
        ahead = anticipate_all(kernel, p, ctrl, estimator, W if stochastic else None)
        num = E(t) * p.values[:, ctrl] + live * F(t + P.delta) * ahead
        den = L(t) + live * Lt(t + P.delta)
        return control_path(problem, num / den)

    probe = oracle()
    scale = float(np.max(np.abs(probe.values[:, ctrl]) * (np.abs(E(t)) + np.abs(F(t + P.delta)))))
    return ExampleCase(
        problem=problem,
        control_from_adjoint=from_adjoint,
        adjoint_oracle=oracle,
        scale=scale,
        stochastic=stochastic,
        params=P,
    )


EXAMPLES = {
    "climate": (climate_problem, ClimateParams),
    "consumption": (consumption_problem, ConsumptionParams),
    "lq": (lq_problem, LqParams),
}


def build_example(name: str, n_steps: int, **overrides) -> ExampleCase:
    """Construct an example by name with parameter overrides."""
    if name not in EXAMPLES:
        raise KeyError(f"unknown example {name!r}; choose from {sorted(EXAMPLES)}")
    ctor, params_cls = EXAMPLES[name]
    extra = {}
    if name == "climate":
        for key in ("tail_tol", "extension"):
            if key in overrides:
                extra[key] = overrides.pop(key)
    return ctor(params_cls(**overrides), n_steps=n_steps, **extra)
