"""Maximum-principle machinery for controlled anticipated BSDEs.

A control problem minimizes

    J(v) = E[ int_0^T l(t, Y, Y_a, Z, Z_a, v, v_d) dt + gamma(Y(0)) ]

over controls ``v`` with values in a box, where ``(Y, Z)`` solves the
anticipated BSDE with generator ``f``. With ``H = l - p f`` the adjoint
``p`` solves the delayed SDE

    dp = (f_y p + K_d[f_ya p] - l_y - K_d[l_ya]) dt
       + (f_z p + K_d[f_za p] - l_z - K_d[l_za]) dW,    p(0) = -gamma_y(Y(0)),

and the stationarity process is ``G = H_v + E[K_a H_vd | F_t]``. Every
quantity below lives on the same grid and increment ensemble so that
finite differences and adjoint pairings can be compared path by path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .estimators import ConditionalEstimator, Deterministic, PolyRegression
from .gridrng import IncrementEnsemble, PathEnsemble, TimeGrid
from .iabsde import BackwardProblem, StatePair, picard_solve
from .isdde import ForwardProblem, euler_maruyama
from .kernels import DelayKernel, adjoint_pairing_check, anticipate_all, delay_all

__all__ = [
    "Smooth",
    "ControlProblem",
    "Hamiltonian",
    "Linearization",
    "SmpReport",
    "ARGS",
    "control_path",
    "direction_path",
    "default_estimator",
    "solve_state",
    "cost_functional",
    "evaluate",
    "linearize",
    "assemble_adjoint",
    "solve_adjoint",
    "stationarity_process",
    "check_stationarity",
    "variational_solve",
    "gradient_check",
    "duality_check",
    "sufficiency_probe",
    "projected_gradient_step",
    "verify_partials",
    "smp_report",
]

# argument order of generators and running costs
ARGS = ("y", "ya", "z", "za", "v", "vd")


def _zero(t, y, ya, z, za, v, vd):
    return np.zeros(np.broadcast(y, v).shape)


def _zero_path(t):
    return np.zeros_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class Smooth:
    """A scalar function of ``(t, y, ya, z, za, v, vd)`` with its partials.

    Missing partials default to zero, so only the arguments a function
    actually depends on need to be supplied.
    """

    value: Callable
    d_y: Callable = _zero
    d_ya: Callable = _zero
    d_z: Callable = _zero
    d_za: Callable = _zero
    d_v: Callable = _zero
    d_vd: Callable = _zero

    def partial(self, name: str) -> Callable:
        return getattr(self, "d_" + name)


@dataclass(frozen=True)
class ControlProblem:
    """Everything needed to evaluate ``J`` and its maximum-principle data.

    ``vd_extension`` fixes ``H_vd`` after ``T`` inside the stationarity
    process: ``"zero"`` sets it to 0, ``"hold"`` evaluates it with ``p``
    held at ``p(T)`` and the coefficients of the last step.
    """

    grid: TimeGrid
    f: Smooth
    l: Smooth
    gamma: Callable = lambda y: y
    gamma_y: Callable = lambda y: np.ones_like(y)
    kernel_y: Optional[DelayKernel] = None
    kernel_z: Optional[DelayKernel] = None
    kernel_v: Optional[DelayKernel] = None
    u_lo: float = -math.inf
    u_hi: float = math.inf
    control_history: Callable = _zero_path
    xi: object = 0.0
    eta: object = 0.0
    convex: bool = False
    vd_extension: str = "zero"
    name: str = "custom"
    lipschitz: Optional[float] = None

    def __post_init__(self):
        if not self.u_lo <= self.u_hi:
            raise ValueError(f"empty control box [{self.u_lo}, {self.u_hi}]")
        if self.vd_extension not in ("zero", "hold"):
            raise ValueError(f"unknown vd_extension {self.vd_extension!r}")


@dataclass(frozen=True)
class Hamiltonian:
    """``H = l - p f`` and its partials, built from those of ``l`` and ``f``."""

    f: Smooth
    l: Smooth

    def value(self, t, y, ya, z, za, v, vd, p):
        return self.l.value(t, y, ya, z, za, v, vd) - p * self.f.value(t, y, ya, z, za, v, vd)

    def partial(self, name, t, y, ya, z, za, v, vd, p):
        a = (t, y, ya, z, za, v, vd)
        return self.l.partial(name)(*a) - p * self.f.partial(name)(*a)


@dataclass(frozen=True)
class Linearization:
    """Partials of ``f`` and ``l`` along a solved trajectory.

    ``fp[name]`` and ``lp[name]`` are ``(paths, nodes)`` arrays on the full
    grid, zero outside ``t_0 .. t_{n-1}``. ``y0`` is ``Y(0)`` per path.
    """

    grid: TimeGrid
    fp: dict = field(repr=False)
    lp: dict = field(repr=False)
    y0: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class SmpReport:
    cost: float
    stationarity_residual: PathEnsemble = field(repr=False)
    max_violation: float
    duality_gap: float
    gradient_check: tuple
    picard_iterations: int

    def summary(self) -> dict:
        fd, pairing, rel = self.gradient_check
        return {
            "J": self.cost,
            "max_violation": self.max_violation,
            "duality_gap": self.duality_gap,
            "gradient_fd": fd,
            "gradient_pairing": pairing,
            "gradient_rel_error": rel,
            "picard_iterations": self.picard_iterations,
        }


def default_estimator(incs: Optional[IncrementEnsemble]) -> ConditionalEstimator:
    return Deterministic() if incs is None else PolyRegression(2)


def control_path(problem: ControlProblem, values, n_paths: Optional[int] = None) -> PathEnsemble:
    """Admissible control on the full grid from values on ``t_0 .. t_{n-1}``.

    ``values`` may be a scalar, a function of time, an array over the
    control nodes (one row per path or a single row) or a
    :class:`PathEnsemble`. History nodes take the prescribed past control
    and nodes from ``T`` on repeat the last control value.
    """
    g = problem.grid
    ctrl = g.control_nodes
    if isinstance(values, PathEnsemble):
        inner = values.values[:, ctrl]
    elif callable(values):
        inner = np.atleast_2d(np.broadcast_to(np.asarray(values(g.times[ctrl]), float), ctrl.shape))
    else:
        inner = np.asarray(values, dtype=float)
        if inner.ndim < 2:
            inner = np.broadcast_to(inner, (ctrl.size,))[None, :]
    if inner.shape[1] != ctrl.size:
        raise ValueError(f"control has {inner.shape[1]} values, grid has {ctrl.size} control nodes")
    if n_paths is not None and inner.shape[0] == 1:
        inner = np.repeat(inner, n_paths, axis=0)
    out = np.empty((inner.shape[0], g.n_nodes))
    out[:, : g.zero] = np.asarray(problem.control_history(g.times[: g.zero]), float)
    out[:, ctrl] = inner
    out[:, g.end :] = inner[:, -1:]
    return PathEnsemble(g, out)


def _backward(problem: ControlProblem, v: PathEnsemble) -> BackwardProblem:
    return BackwardProblem(
        generator=problem.f.value,
        xi=problem.xi,
        eta=problem.eta,
        kernel_y=problem.kernel_y,
        kernel_z=problem.kernel_z,
        kernel_v=problem.kernel_v,
        control=v,
        lipschitz=problem.lipschitz,
    )


def solve_state(problem, v, incs=None, estimator=None, tol=1e-13, max_iter=60):
    """Solve the state equation under control ``v``; see :func:`picard_solve`."""
    estimator = estimator if estimator is not None else default_estimator(incs)
    return picard_solve(_backward(problem, v), problem.grid, incs, estimator, tol, max_iter)


def _arguments(problem: ControlProblem, v: PathEnsemble, state: StatePair):
    g = problem.grid
    ctrl = g.control_nodes
    Y, Z = state.Y.values, state.Z.values
    n_paths = max(Y.shape[0], v.n_paths)
    shape = (n_paths, ctrl.size)
    if problem.kernel_v is not None:
        vd = delay_all(problem.kernel_v, v, ctrl)
    else:
        vd = np.zeros((v.n_paths, ctrl.size))
    zeros = np.zeros(shape)
    args = {
        "y": Y[:, ctrl],
        "ya": state.Ya if state.Ya is not None else zeros,
        "z": Z[:, ctrl],
        "za": state.Za if state.Za is not None else zeros,
        "v": v.values[:, ctrl],
        "vd": vd,
    }
    args = {k: np.broadcast_to(a, shape) for k, a in args.items()}
    return g.times[ctrl][None, :], args


def evaluate(problem, v, incs=None, estimator=None, tol=1e-13, max_iter=60):
    """``(J, state, sweeps)`` for control ``v``."""
    state, sweeps, _ = solve_state(problem, v, incs, estimator, tol, max_iter)
    return _cost_from_state(problem, v, state), state, sweeps


def _cost_from_state(problem, v, state) -> float:
    t, a = _arguments(problem, v, state)
    running = np.asarray(problem.l.value(t, *(a[k] for k in ARGS)), float)
    running = np.broadcast_to(running, a["y"].shape).sum(axis=1) * problem.grid.h
    y0 = state.Y.values[:, problem.grid.zero]
    return float(np.mean(running + np.asarray(problem.gamma(y0), float)))


def cost_functional(problem, v, incs=None, estimator=None, tol=1e-13, max_iter=60) -> float:
    """``J(v)`` with left-point quadrature of the running cost."""
    return evaluate(problem, v, incs, estimator, tol, max_iter)[0]


def linearize(problem: ControlProblem, v: PathEnsemble, state: StatePair) -> Linearization:
    g = problem.grid
    ctrl = g.control_nodes
    t, a = _arguments(problem, v, state)
    vals = [a[k] for k in ARGS]

    def spread(fn):
        out = np.zeros((a["y"].shape[0], g.n_nodes))
        out[:, ctrl] = np.broadcast_to(np.asarray(fn(t, *vals), float), a["y"].shape)
        return out

    fp = {k: spread(problem.f.partial(k)) for k in ARGS}
    lp = {k: spread(problem.l.partial(k)) for k in ARGS}
    return Linearization(g, fp, lp, state.Y.values[:, g.zero].copy())


def assemble_adjoint(problem: ControlProblem, lin: Linearization) -> ForwardProblem:
    """The adjoint as a delayed forward SDE for :func:`euler_maruyama`."""
    g = problem.grid
    ctrl = g.control_nodes
    ky, kz = problem.kernel_y, problem.kernel_z
    fp, lp = lin.fp, lin.lp

    def forcing(l_direct, l_delayed, kernel):
        out = -l_direct
        if kernel is not None:
            out = out.copy()
            out[:, ctrl] -= delay_all(kernel, l_delayed, ctrl, g)
        return out

    drift_force = forcing(lp["y"], lp["ya"], ky)
    diff_force = forcing(lp["z"], lp["za"], kz)
    fy, fz = fp["y"], fp["z"]

    def drift(s, x, xd):
        i = g.node(s)
        return fy[:, i] * x + xd + drift_force[:, i]

    def diffusion(s, x, xd):
        i = g.node(s)
        return fz[:, i] * x + xd + diff_force[:, i]

    if kz is None:
        # no delayed diffusion term; keep the drift kernel but weight it by zero
        diff_kernel, diff_coef = ky, np.zeros_like(fp["za"])
    else:
        diff_kernel, diff_coef = kz, fp["za"]
    return ForwardProblem(
        drift=drift,
        diffusion=diffusion,
        kernel=ky,
        initial_value=-np.asarray(problem.gamma_y(lin.y0), float),
        diffusion_kernel=diff_kernel,
        delay_coef=fp["ya"] if ky is not None else None,
        diffusion_delay_coef=diff_coef,
        future="hold",
    )


def solve_adjoint(problem: ControlProblem, lin: Linearization, incs=None) -> PathEnsemble:
    return euler_maruyama(assemble_adjoint(problem, lin), problem.grid, incs)


def stationarity_process(problem, lin, p: PathEnsemble, incs=None, estimator=None) -> PathEnsemble:
    """``G = H_v + E[K_a H_vd | F_t]`` on ``t_0 .. t_{n-1}`` (zero elsewhere)."""
    g = problem.grid
    ctrl = g.control_nodes
    estimator = estimator if estimator is not None else default_estimator(incs)
    P = p.values
    fp, lp = lin.fp, lin.lp
    n_paths = max(P.shape[0], fp["v"].shape[0])
    G = np.zeros((n_paths, g.n_nodes))
    G[:, ctrl] = lp["v"][:, ctrl] - P[:, ctrl] * fp["v"][:, ctrl]
    if problem.kernel_v is not None:
        Hvd = np.zeros((n_paths, g.n_nodes))
        Hvd[:, ctrl] = lp["vd"][:, ctrl] - P[:, ctrl] * fp["vd"][:, ctrl]
        if problem.vd_extension == "hold":
            last = g.end - 1
            tail = slice(g.end, g.n_nodes)
            Hvd[:, tail] = lp["vd"][:, last : last + 1] - P[:, tail] * fp["vd"][:, last : last + 1]
        W = None if incs is None else incs.brownian
        G[:, ctrl] += anticipate_all(problem.kernel_v, Hvd, ctrl, estimator, W, grid=g)
    return PathEnsemble(g, G)


def check_stationarity(G: PathEnsemble, u: PathEnsemble, u_lo=-math.inf, u_hi=math.inf, tol=1e-12) -> float:
    """Largest violation of ``G (v - u) >= 0`` for all ``v`` in the box.

    Inside the box the violation is ``|G|``. Where ``u`` sits on the lower
    bound (within ``tol``) only ``G < 0`` violates and the violation is
    ``-G``; on the upper bound it is ``G``.
    """
    ctrl = G.grid.control_nodes
    g = G.values[:, ctrl]
    uu = np.broadcast_to(u.values[:, ctrl], np.broadcast_shapes(u.values[:, ctrl].shape, g.shape))
    g = np.broadcast_to(g, uu.shape)
    at_lo = uu <= u_lo + tol
    at_hi = uu >= u_hi - tol
    viol = np.abs(g)
    viol = np.where(at_lo, np.maximum(0.0, -g), viol)
    viol = np.where(at_hi, np.maximum(0.0, g), viol)
    viol = np.where(at_lo & at_hi, 0.0, viol)
    return float(viol.max()) if viol.size else 0.0


def variational_solve(problem, lin, v_hat: PathEnsemble, incs=None, estimator=None, tol=1e-13, max_iter=60):
    """Linearized state ``(Y_hat, Z_hat)`` driven by the direction ``v_hat``."""
    g = problem.grid
    fp = lin.fp

    def gen(t, y, ya, z, za, v, vd):
        i = g.node(t)
        return (
            fp["y"][:, i] * y + fp["ya"][:, i] * ya + fp["z"][:, i] * z
            + fp["za"][:, i] * za + fp["v"][:, i] * v + fp["vd"][:, i] * vd
        )

    bp = BackwardProblem(gen, 0.0, 0.0, problem.kernel_y, problem.kernel_z, problem.kernel_v, v_hat)
    estimator = estimator if estimator is not None else default_estimator(incs)
    state, _, _ = picard_solve(bp, g, incs, estimator, tol, max_iter)
    return state


def direction_path(problem, direction) -> PathEnsemble:
    """Perturbation direction: zero before ``t = 0`` and from ``T`` on."""
    g = problem.grid
    if isinstance(direction, PathEnsemble):
        d = direction
    else:
        hist = replace(problem, control_history=_zero_path)
        d = control_path(hist, direction)
    if np.any(d.values[:, : g.zero] != 0):
        raise ValueError("direction must vanish on history nodes")
    vals = d.values.copy()
    vals[:, g.end :] = 0.0
    return PathEnsemble(g, vals)


def gradient_check(problem, u, direction, eps=1e-4, incs=None, estimator=None, floor=1e-12, tol=1e-13):
    """Forward difference of ``J`` along ``direction`` against ``E int G v_hat dt``.

    Both costs use the same increments. Returns ``(fd, pairing, rel_error)``.
    """
    g = problem.grid
    u = u if isinstance(u, PathEnsemble) else control_path(problem, u)
    d = direction_path(problem, direction)
    J0, state, _ = evaluate(problem, u, incs, estimator, tol)
    bumped = PathEnsemble(g, u.values + eps * d.values)
    J1 = cost_functional(problem, bumped, incs, estimator, tol)
    fd = (J1 - J0) / eps
    lin = linearize(problem, u, state)
    p = solve_adjoint(problem, lin, incs)
    G = stationarity_process(problem, lin, p, incs, estimator)
    ctrl = g.control_nodes
    pairing = float(np.mean(np.sum(G.values[:, ctrl] * d.values[:, ctrl], axis=1)) * g.h)
    rel = abs(fd - pairing) / max(abs(fd), abs(pairing), floor)
    return fd, pairing, rel


def duality_check(problem, lin: Linearization, p: PathEnsemble, y_hat: PathEnsemble, z_hat: PathEnsemble) -> float:
    """Largest relative gap of the kernel pairings that cancel in the duality.

    The pairs are ``(f_ya p, Y_hat)`` and ``(l_ya, Y_hat)`` under
    ``kernel_y`` and ``(f_za p, Z_hat)`` and ``(l_za, Z_hat)`` under
    ``kernel_z``. Each gap is ``<a, K_a b> - <K_d a, b>`` divided by its
    absolute pairing.
    """
    P = p.values
    pairs = []
    if problem.kernel_y is not None:
        pairs += [(problem.kernel_y, lin.fp["ya"] * P, y_hat), (problem.kernel_y, lin.lp["ya"], y_hat)]
    if problem.kernel_z is not None:
        pairs += [(problem.kernel_z, lin.fp["za"] * P, z_hat), (problem.kernel_z, lin.lp["za"], z_hat)]
    gaps = [adjoint_pairing_check(k, a, b.values, problem.grid, relative=True) for k, a, b in pairs]
    return max(gaps, default=0.0)


def random_perturbation(grid: TimeGrid, rng: np.random.Generator, magnitude: float) -> np.ndarray:
    """Smooth random function on the control nodes with sup norm ``magnitude``."""
    t = grid.times[grid.control_nodes] / grid.T
    c = rng.standard_normal(4)
    shape = c[0] + sum(c[k] * np.cos(k * np.pi * t + rng.uniform(0, 2 * np.pi)) for k in range(1, 4))
    peak = np.abs(shape).max()
    return magnitude * shape / peak if peak > 0 else np.zeros_like(t)


def sufficiency_probe(problem, u_star, n_perturbations=50, magnitude=0.1, seed=0, incs=None, estimator=None):
    """Costs of ``u_star`` and of random admissible perturbations of it.

    Perturbations are smooth deterministic functions of time, clipped into
    the control box. Returns a list of ``(J(u_star), J(perturbed))``.
    """
    if not problem.convex:
        raise ValueError(f"problem {problem.name!r} is not declared convex")
    g = problem.grid
    ctrl = g.control_nodes
    u_star = u_star if isinstance(u_star, PathEnsemble) else control_path(problem, u_star)
    J_star = cost_functional(problem, u_star, incs, estimator)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_perturbations):
        delta = random_perturbation(g, rng, magnitude)
        vals = u_star.values.copy()
        vals[:, ctrl] = np.clip(vals[:, ctrl] + delta, problem.u_lo, problem.u_hi)
        vals[:, g.end :] = vals[:, g.end - 1 : g.end]
        out.append((J_star, cost_functional(problem, PathEnsemble(g, vals), incs, estimator)))
    return out


def projected_gradient_step(problem, u: PathEnsemble, G: PathEnsemble, tau: float) -> PathEnsemble:
    """``u - tau G`` clipped into the box on the control nodes."""
    g = problem.grid
    ctrl = g.control_nodes
    vals = np.broadcast_to(u.values, np.broadcast_shapes(u.values.shape, G.values.shape)).copy()
    vals[:, ctrl] = np.clip(vals[:, ctrl] - tau * G.values[:, ctrl], problem.u_lo, problem.u_hi)
    vals[:, g.end :] = vals[:, g.end - 1 : g.end]
    return PathEnsemble(g, vals)


def verify_partials(fn: Smooth, seed: int = 0, n_probe: int = 20, step: float = 1e-5, box=None) -> float:
    """Largest relative mismatch between declared partials and central differences.

    ``box`` maps argument names to ``(lo, hi)`` sampling ranges (default
    ``(-1, 1)``; ``t`` defaults to ``(0, 1)``).
    """
    rng = np.random.default_rng(seed)
    box = dict(box or {})
    lo_t, hi_t = box.get("t", (0.0, 1.0))
    worst = 0.0
    for _ in range(n_probe):
        t = rng.uniform(lo_t, hi_t)
        x = {k: rng.uniform(*box.get(k, (-1.0, 1.0))) for k in ARGS}
        for k in ARGS:
            up, dn = dict(x), dict(x)
            up[k] += step
            dn[k] -= step
            fd = (fn.value(t, *(up[a] for a in ARGS)) - fn.value(t, *(dn[a] for a in ARGS))) / (2 * step)
            exact = fn.partial(k)(t, *(x[a] for a in ARGS))
            fd, exact = float(np.asarray(fd).ravel()[0]), float(np.asarray(exact).ravel()[0])
            worst = max(worst, abs(fd - exact) / max(1.0, abs(exact)))
    return worst


def smp_report(problem, u, incs=None, estimator=None, direction=None, eps=1e-4, stationarity_tol=1e-12) -> SmpReport:
    """Cost, stationarity, duality and gradient diagnostics at control ``u``."""
    g = problem.grid
    u = u if isinstance(u, PathEnsemble) else control_path(problem, u)
    estimator = estimator if estimator is not None else default_estimator(incs)
    J, state, sweeps = evaluate(problem, u, incs, estimator)
    lin = linearize(problem, u, state)
    p = solve_adjoint(problem, lin, incs)
    G = stationarity_process(problem, lin, p, incs, estimator)
    viol = check_stationarity(G, u, problem.u_lo, problem.u_hi, stationarity_tol)
    if direction is None:
        direction = lambda t: np.sin(np.pi * t / g.T)
    d = direction_path(problem, direction)
    hat = variational_solve(problem, lin, d, incs, estimator)
    gap = duality_check(problem, lin, p, hat.Y, hat.Z)
    grad = gradient_check(problem, u, d, eps, incs, estimator)
    return SmpReport(J, G, viol, gap, grad, sweeps)
