"""Forward solvers for SDEs driven by an infinitely delayed average.

The equation is

    dX = b(t, X(t), X_d(t)) dt + sigma(t, X(t), X_d(t)) dW,   X = initial path on t < 0,

with ``X_d`` a kernel-weighted average of the past (see :mod:`.kernels`).
Two closed-form solutions used as oracles also live here: the hyperbolic
cosine adjoint of the consumption problem and the segment-by-segment
solution of the linear adjoint with a single point delay.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import NonFinite
from .gridrng import IncrementEnsemble, PathEnsemble, TimeGrid
from .kernels import DelayKernel, MeasureSpec, discretize_measure

__all__ = [
    "ForwardProblem",
    "euler_maruyama",
    "consumption_adjoint_closed_form",
    "lq_adjoint_segments",
    "lq_adjoint_forward_problem",
]

Coef = Union[float, Callable[[np.ndarray], np.ndarray]]


def _zero_path(t):
    return np.zeros_like(np.asarray(t, dtype=float))


def _no_noise(t, x, x_d):
    return 0.0


def as_function(c: Coef) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a constant so it evaluates elementwise on time arrays."""
    if callable(c):
        return c
    value = float(c)
    return lambda t: np.full(np.shape(t), value)


@dataclass(frozen=True)
class ForwardProblem:
    """Coefficients, kernel and initial data of a delayed forward SDE.

    ``delay_coef`` is an optional process (``(paths, nodes)`` or
    ``(nodes,)``) multiplying ``X`` inside the drift's delayed average, so
    that ``X_d(t) = sum_j w_j c(t - k_j h) X(t - k_j h)``. The diffusion may
    use its own kernel and coefficient; both default to the drift's.
    ``future`` selects how nodes after ``T`` are filled: ``"hold"`` repeats
    ``X(T)``, ``"zero"`` writes zeros.
    """

    drift: Callable
    diffusion: Callable = _no_noise
    kernel: Optional[DelayKernel] = None
    initial_path: Callable = _zero_path
    initial_value: Optional[Union[float, np.ndarray]] = None
    diffusion_kernel: Optional[DelayKernel] = None
    delay_coef: Optional[np.ndarray] = None
    diffusion_delay_coef: Optional[np.ndarray] = None
    lipschitz: Optional[float] = None
    future: str = "hold"


class _DelayStencil:
    """Precomputed per-node weights of one delayed average."""

    def __init__(self, kernel, coef, grid):
        self.kernel = kernel
        self.coef = None if coef is None else np.atleast_2d(np.asarray(coef, dtype=float))
        if kernel is not None:
            nodes = grid.control_nodes
            t = grid.times
            other = nodes[:, None] - kernel.lags[None, :]
            self.other = other
            self.w = np.asarray(kernel.weights(t[other], t[nodes][:, None]), dtype=float)

    def __call__(self, x, step):
        if self.kernel is None:
            return np.zeros(x.shape[0])
        idx = self.other[step]
        vals = x[:, idx]
        if self.coef is not None:
            vals = vals * self.coef[:, idx]
        return vals @ self.w[step]


def euler_maruyama(
    problem: ForwardProblem, grid: TimeGrid, incs: Optional[IncrementEnsemble] = None
) -> PathEnsemble:
    """Explicit Euler-Maruyama on the grid's steps.

    ``X(i+1) = X(i) + b(t_i, X(i), X_d(i)) h + sigma(t_i, X(i), X_d(i)) dW_i``.
    Without ``incs`` the noise is zero and a single path is produced unless
    the initial value carries more.
    """
    h = grid.h
    n = grid.n_steps
    if incs is not None and incs.n_steps != n:
        raise ValueError(f"increments have {incs.n_steps} steps, grid has {n}")
    x0 = problem.initial_path(np.array([0.0]))[0] if problem.initial_value is None else problem.initial_value
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n_paths = incs.n_paths if incs is not None else x0.size
    X = np.zeros((n_paths, grid.n_nodes))
    t = grid.times
    if grid.history_nodes:
        X[:, : grid.zero] = np.asarray(problem.initial_path(t[: grid.zero]), dtype=float)
    X[:, grid.zero] = x0

    drift_delay = _DelayStencil(problem.kernel, problem.delay_coef, grid)
    diff_kernel = problem.diffusion_kernel if problem.diffusion_kernel is not None else problem.kernel
    diff_coef = problem.diffusion_delay_coef if problem.diffusion_delay_coef is not None else problem.delay_coef
    same = diff_kernel is problem.kernel and diff_coef is problem.delay_coef
    diff_delay = drift_delay if same else _DelayStencil(diff_kernel, diff_coef, grid)

    for step in range(n):
        i = grid.zero + step
        xi = X[:, i]
        xd = drift_delay(X, step)
        xd_sig = xd if same else diff_delay(X, step)
        nxt = xi + np.asarray(problem.drift(t[i], xi, xd), dtype=float) * h
        if incs is not None:
            nxt = nxt + np.asarray(problem.diffusion(t[i], xi, xd_sig), dtype=float) * incs.increments[:, step]
        if not np.all(np.isfinite(nxt)):
            raise NonFinite(f"state not finite at t={t[i + 1]:.6g}")
        X[:, i + 1] = nxt
    _fill_future(X, grid, problem.future)
    return PathEnsemble(grid, X)


def _fill_future(X, grid, mode):
    if mode == "hold":
        X[:, grid.end + 1 :] = X[:, grid.end : grid.end + 1]
    elif mode == "zero":
        X[:, grid.end + 1 :] = 0.0
    else:
        raise ValueError(f"unknown future extension {mode!r}")


def consumption_adjoint_closed_form(b: float, grid: TimeGrid, future: str = "hold") -> PathEnsemble:
    """``p(t) = -cosh(sqrt(b) t)`` on ``[0, T]``, zero before ``t = 0``."""
    if b < 0:
        raise ValueError(f"b must be >= 0, got {b!r}")
    t = grid.times
    X = np.where(t >= 0, -np.cosh(np.sqrt(b) * np.maximum(t, 0.0)), 0.0)[None, :]
    _fill_future(X, grid, future)
    return PathEnsemble(grid, X)


def lq_adjoint_segments(
    A: Coef,
    B: Coef,
    C: Coef,
    D: Coef,
    delta: float,
    grid: TimeGrid,
    incs: Optional[IncrementEnsemble] = None,
    p0: float = -1.0,
    ito_correction: bool = True,
    future: str = "hold",
) -> PathEnsemble:
    """Solve the point-delay linear adjoint by variation of constants.

    ``dp = (A p + B(t-d) p(t-d)) dt + (C p + D(t-d) p(t-d)) dW``, ``p(0) = p0``,
    ``p = 0`` before 0. On each segment ``[k d, (k+1) d]``

        p(t) = Phi_k(t) [p(k d) + int (B - C D) p(s-d) / Phi_k ds
                                + int D p(s-d) / Phi_k dW],

    with ``Phi_k`` the stochastic exponential of ``A ds + C dW`` restarted at
    ``k d``. All integrals are left-point sums on the grid's increments.
    ``ito_correction=False`` drops the ``- C D`` drift term, which is only
    exact when ``C * D = 0``.
    """
    m = grid.lag_index(delta)
    if m < 1:
        raise ValueError("delta must be at least one grid step")
    if grid.history_nodes < m:
        raise ValueError("grid history must cover the delay")
    A, B, C, D = (as_function(c) for c in (A, B, C, D))
    h = grid.h
    t = grid.times
    n_paths = 1 if incs is None else incs.n_paths
    dW = np.zeros((n_paths, grid.n_steps)) if incs is None else incs.increments
    P = np.zeros((n_paths, grid.n_nodes))
    P[:, grid.zero] = p0

    steps = np.arange(grid.n_steps)
    nodes = grid.zero + steps
    a, c = A(t[nodes]), C(t[nodes])
    b, d = B(t[nodes] - delta), D(t[nodes] - delta)
    drift_k = b - c * d if ito_correction else b

    for start in range(0, grid.n_steps, m):
        s = grid.zero + start
        log_phi = np.zeros(n_paths)
        integral = np.zeros(n_paths)
        for j in range(start, min(start + m, grid.n_steps)):
            i = grid.zero + j
            past = P[:, i - m]
            phi = np.exp(log_phi)
            integral += (drift_k[j] * past * h + d[j] * past * dW[:, j]) / phi
            log_phi += a[j] * h + c[j] * dW[:, j] - 0.5 * c[j] ** 2 * h
            P[:, i + 1] = np.exp(log_phi) * (P[:, s] + integral)
        if not np.all(np.isfinite(P[:, s : grid.zero + min(start + m, grid.n_steps) + 1])):
            raise NonFinite(f"segment starting at t={t[s]:.6g} blew up")
    _fill_future(P, grid, future)
    return PathEnsemble(grid, P)


def lq_adjoint_forward_problem(
    A: Coef, B: Coef, C: Coef, D: Coef, delta: float, grid: TimeGrid, p0: float = -1.0
) -> ForwardProblem:
    """The same adjoint as a generic delayed SDE for :func:`euler_maruyama`."""
    A, B, C, D = (as_function(c) for c in (A, B, C, D))
    kernel = discretize_measure(MeasureSpec.dirac(delta), grid)
    t = grid.times
    return ForwardProblem(
        drift=lambda s, x, xd: A(s) * x + xd,
        diffusion=lambda s, x, xd: C(s) * x + xd,
        kernel=kernel,
        initial_value=p0,
        diffusion_kernel=kernel,
        delay_coef=B(t),
        diffusion_delay_coef=D(t),
    )
