"""Backward solver for BSDEs with anticipated averages in the generator.

The equation on ``[0, T]`` is

    -dY = f(t, Y, Y_a, Z, Z_a, v, v_d) dt - Z dW,
    Y = xi and Z = eta on [T, T + span],

where ``Y_a = E[K_a Y | F_t]`` and ``Z_a = E[K_a Z | F_t]`` are anticipated
kernel averages and ``v_d = K_d v`` is a delayed average of the control.
It is solved by Picard iteration over the whole horizon: each sweep freezes
``Y_a, Z_a`` at the previous iterate and runs the explicit backward scheme

    Z(i) = E_i[Y(i+1) dW_i] / h,
    Y(i) = E_i[Y(i+1)] + h f(t_i, E_i[Y(i+1)], Y_a(i), Z(i), Z_a(i), v(i), v_d(i)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import NoConvergence, NonFinite
from .estimators import ConditionalEstimator, Deterministic, NestedMC, PolyRegression
from .gridrng import IncrementEnsemble, PathEnsemble, TimeGrid
from .kernels import DelayKernel, anticipate_all, delay_all

__all__ = [
    "ConditionalEstimator",
    "Deterministic",
    "PolyRegression",
    "NestedMC",
    "BackwardProblem",
    "StatePair",
    "backward_euler_pass",
    "picard_solve",
    "apriori_estimate_check",
    "sample_terminal",
]

# terminal data: a constant, or a callable (t, W_T) broadcasting over
# t of shape (1, nodes) and W_T of shape (paths, 1)
Terminal = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class BackwardProblem:
    generator: Callable
    xi: Terminal = 0.0
    eta: Terminal = 0.0
    kernel_y: Optional[DelayKernel] = None
    kernel_z: Optional[DelayKernel] = None
    kernel_v: Optional[DelayKernel] = None
    control: Optional[PathEnsemble] = None
    lipschitz: Optional[float] = None


@dataclass(frozen=True)
class StatePair:
    """Solution ``(Y, Z)`` plus the anticipated averages used to get it.

    ``Ya`` and ``Za`` are ``(paths, n_steps)`` arrays on the nodes
    ``t_0 .. t_{n-1}``.
    """

    Y: PathEnsemble
    Z: PathEnsemble
    Ya: Optional[np.ndarray] = None
    Za: Optional[np.ndarray] = None


def sample_terminal(data: Terminal, times: np.ndarray, w_T: np.ndarray) -> np.ndarray:
    """Evaluate terminal data at ``times`` for every path."""
    shape = (w_T.shape[0], times.size)
    if callable(data):
        vals = data(times[None, :], w_T[:, None])
    else:
        vals = float(data)
    return np.broadcast_to(np.asarray(vals, dtype=float), shape).copy()


def _paths_and_noise(problem, grid, incs):
    n_paths = 1
    if incs is not None:
        n_paths = incs.n_paths
    elif problem.control is not None:
        n_paths = problem.control.n_paths
    if incs is None:
        dW = np.zeros((n_paths, grid.n_steps))
        W = np.zeros((n_paths, grid.n_steps + 1))
    else:
        if incs.n_steps != grid.n_steps:
            raise ValueError(f"increments have {incs.n_steps} steps, grid has {grid.n_steps}")
        dW, W = incs.increments, incs.brownian
    return n_paths, dW, W


def _control_terms(problem, grid, n_paths):
    nodes = grid.control_nodes
    if problem.control is None:
        zeros = np.zeros((n_paths, nodes.size))
        return zeros, zeros
    v = np.broadcast_to(problem.control.values[:, nodes], (n_paths, nodes.size))
    if problem.kernel_v is None:
        vd = np.zeros_like(v)
    else:
        vd = np.broadcast_to(delay_all(problem.kernel_v, problem.control, nodes), (n_paths, nodes.size))
    return v, vd


def _terminal_fill(problem, grid, W, n_paths):
    Y = np.zeros((n_paths, grid.n_nodes))
    Z = np.zeros((n_paths, grid.n_nodes))
    tail = grid.times[grid.end :]
    w_T = W[:, -1]
    Y[:, grid.end :] = sample_terminal(problem.xi, tail, w_T)
    Z[:, grid.end :] = sample_terminal(problem.eta, tail, w_T)
    return Y, Z


def initial_guess(problem: BackwardProblem, grid: TimeGrid, incs=None) -> StatePair:
    """Zero on ``[0, T)`` with the terminal data in place."""
    n_paths, _, W = _paths_and_noise(problem, grid, incs)
    Y, Z = _terminal_fill(problem, grid, W, n_paths)
    return StatePair(PathEnsemble(grid, Y), PathEnsemble(grid, Z))


def backward_euler_pass(
    problem: BackwardProblem,
    grid: TimeGrid,
    incs: Optional[IncrementEnsemble],
    Y_prev: PathEnsemble,
    Z_prev: PathEnsemble,
    estimator: ConditionalEstimator,
    control_terms=None,
) -> StatePair:
    """One Picard sweep with anticipated terms frozen at ``(Y_prev, Z_prev)``.

    ``control_terms`` optionally supplies ``(v, v_d)`` on the control nodes
    so that repeated sweeps do not recompute the delayed control.
    """
    h = grid.h
    n_paths, dW, W = _paths_and_noise(problem, grid, incs)
    nodes = grid.control_nodes
    t = grid.times

    def frozen(kernel, prev):
        if kernel is None:
            return np.zeros((n_paths, nodes.size))
        vals = np.broadcast_to(prev.values, (n_paths, grid.n_nodes))
        return anticipate_all(kernel, vals, nodes, estimator, W, grid=grid)

    Ya = frozen(problem.kernel_y, Y_prev)
    Za = frozen(problem.kernel_z, Z_prev)
    v, vd = control_terms if control_terms is not None else _control_terms(problem, grid, n_paths)
    Y, Z = _terminal_fill(problem, grid, W, n_paths)

    for j in range(grid.n_steps - 1, -1, -1):
        i = grid.zero + j
        nxt = Y[:, i + 1]
        ey, ez = estimator.expect_pair(nxt, dW[:, j], W[:, j], t[i])
        z = ez / h
        Z[:, i] = z
        Y[:, i] = ey + h * np.asarray(
            problem.generator(t[i], ey, Ya[:, j], z, Za[:, j], v[:, j], vd[:, j]), dtype=float
        )
        if not np.all(np.isfinite(Y[:, i])):
            raise NonFinite(f"Y not finite at t={t[i]:.6g}")
    return StatePair(PathEnsemble(grid, Y), PathEnsemble(grid, Z), Ya, Za)


def _sup_rms(a: PathEnsemble, b: PathEnsemble, grid: TimeGrid) -> float:
    sl = slice(grid.zero, grid.end + 1)
    d = np.broadcast_to(a.values, np.broadcast_shapes(a.values.shape, b.values.shape))[:, sl] - b.values[:, sl]
    return float(np.sqrt(np.mean(d * d, axis=0)).max())


def picard_solve(
    problem: BackwardProblem,
    grid: TimeGrid,
    incs: Optional[IncrementEnsemble] = None,
    estimator: Optional[ConditionalEstimator] = None,
    tol: float = 1e-10,
    max_iter: int = 50,
    initial: Optional[StatePair] = None,
):
    """Iterate :func:`backward_euler_pass` until successive iterates agree.

    The residual is the largest over nodes of the path-RMS change in ``Y``
    or ``Z``. Returns ``(state, sweeps, residual_history)``; raises
    :class:`NoConvergence` if ``tol`` is not reached in ``max_iter`` sweeps.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    estimator = estimator if estimator is not None else Deterministic()
    prev = initial if initial is not None else initial_guess(problem, grid, incs)
    history = []
    terms = _control_terms(problem, grid, _paths_and_noise(problem, grid, incs)[0])
    for sweep in range(1, max_iter + 1):
        cur = backward_euler_pass(problem, grid, incs, prev.Y, prev.Z, estimator, terms)
        res = max(_sup_rms(cur.Y, prev.Y, grid), _sup_rms(cur.Z, prev.Z, grid))
        history.append(res)
        if res < tol:
            return cur, sweep, history
        prev = cur
    raise NoConvergence(
        f"Picard residual {history[-1]:.3e} after {max_iter} sweeps (tol {tol:.1e})",
        history,
    )


def apriori_estimate_check(problem: BackwardProblem, solution: StatePair, grid: TimeGrid):
    """Both sides of the energy bound for a solved problem.

    ``lhs = E[max_t |Y|^2 + int_0^T |Z|^2 dt]`` and
    ``rhs = E[max_{t>=T} |xi|^2 + int_T |eta|^2 dt + (int_0^T |f(t,0,0,0,0,v,v_d)| dt)^2]``,
    all as left-point sums. Returns ``(lhs, rhs, lhs / rhs)``; the ratio is 0
    when both sides vanish.
    """
    h = grid.h
    Y, Z = solution.Y.values, solution.Z.values
    n_paths = Y.shape[0]
    inner = slice(grid.zero, grid.end + 1)
    ctrl = grid.control_nodes
    lhs_p = np.max(Y[:, inner] ** 2, axis=1) + np.sum(Z[:, ctrl] ** 2, axis=1) * h

    v, vd = _control_terms(problem, grid, n_paths)
    zero = np.zeros(n_paths)
    f0 = np.stack(
        [
            np.broadcast_to(
                np.asarray(problem.generator(grid.time(i), zero, zero, zero, zero, v[:, j], vd[:, j]), float),
                (n_paths,),
            )
            for j, i in enumerate(ctrl)
        ],
        axis=1,
    )
    tail_eta = Z[:, grid.end : grid.n_nodes - 1]
    rhs_p = (
        np.max(Y[:, grid.end :] ** 2, axis=1)
        + np.sum(tail_eta**2, axis=1) * h
        + (np.sum(np.abs(f0), axis=1) * h) ** 2
    )
    lhs, rhs = float(lhs_p.mean()), float(rhs_p.mean())
    if rhs > 0:
        ratio = lhs / rhs
    else:
        ratio = 0.0 if lhs == 0 else float("inf")
    return lhs, rhs, ratio
