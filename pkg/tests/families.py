"""Seeded random problem families shared by property and acceptance tests."""

import numpy as np

from anticip_smp.gridrng import brownian_increments, make_grid
from anticip_smp.iabsde import BackwardProblem
from anticip_smp.kernels import MeasureSpec, discretize_measure
from anticip_smp.smp import ControlProblem, Smooth


def random_linear_bsde(seed, n_steps=50, n_paths=400):
    """Linear anticipated BSDE with random kernels, coefficients and data.

    Returns ``(problem, grid, incs)``.
    """
    rng = np.random.default_rng(seed)
    T = 1.0
    h = T / n_steps
    rate = rng.uniform(0.5, 3.0)
    lag = int(rng.integers(1, 6)) * h
    ky_spec = MeasureSpec.exponential(rate, 1e-6)
    span = max(ky_spec.truncation_span, lag)
    grid = make_grid(T, n_steps, history_span=span, future_span=span)
    ky = discretize_measure(ky_spec, grid)
    kz = discretize_measure(MeasureSpec.dirac(lag), grid)
    a, b, c, d = rng.uniform(-1.0, 1.0, 4)
    alpha, omega, beta = rng.uniform(-1.0, 1.0, 3)
    x0, x1, x2 = rng.uniform(-1.0, 1.0, 3)
    e0 = rng.uniform(-0.5, 0.5)

    def gen(t, y, ya, z, za, v, vd):
        return a * y + b * ya + c * z + d * za + alpha * np.sin(3 * omega * t) + beta

    def xi(t, w):
        return x0 + x1 * w + x2 * np.cos(t)

    problem = BackwardProblem(gen, xi, e0, ky, kz)
    return problem, grid, brownian_increments(grid, n_paths, seed)


def random_linear_control(seed, n_steps=40):
    """Linear-quadratic control problem with random kernels and coefficients.

    Every coefficient is a deterministic function of time so the state,
    variational state and adjoint are genuinely stochastic only through
    the terminal data. Returns ``(problem, rng)``.
    """
    rng = np.random.default_rng(seed)
    T = 1.0
    h = T / n_steps
    specs = [
        MeasureSpec.exponential(rng.uniform(0.5, 3.0), 1e-6),
        MeasureSpec.uniform(int(rng.integers(2, 10)) * h),
        MeasureSpec.from_atoms([(int(rng.integers(1, 8)) * h, rng.uniform(0.2, 1.0)) for _ in range(3)]),
    ]
    order = rng.permutation(3)
    ky_spec, kz_spec, kv_spec = (specs[i] for i in order)
    span = max(s.truncation_span for s in specs)
    grid = make_grid(T, n_steps, history_span=span, future_span=span)
    ky, kz, kv = (discretize_measure(s, grid) for s in (ky_spec, kz_spec, kv_spec))
    co = rng.uniform(-1.0, 1.0, 8)
    q = rng.uniform(0.5, 2.0, 4)

    def lin(k):
        return lambda t, y, ya, z, za, v, vd: np.broadcast_to(co[k] * (1 + 0.5 * np.sin(t)), np.broadcast(y, t).shape)

    f = Smooth(
        value=lambda t, y, ya, z, za, v, vd: (1 + 0.5 * np.sin(t))
        * (co[0] * y + co[1] * ya + co[2] * z + co[3] * za + co[4] * v + co[5] * vd),
        d_y=lin(0), d_ya=lin(1), d_z=lin(2), d_za=lin(3), d_v=lin(4), d_vd=lin(5),
    )
    l = Smooth(
        value=lambda t, y, ya, z, za, v, vd: 0.5 * (q[0] * v**2 + q[1] * vd**2) + co[6] * ya + co[7] * za
        + 0.5 * q[2] * y**2 + 0.5 * q[3] * z**2,
        d_y=lambda t, y, ya, z, za, v, vd: q[2] * y,
        d_ya=lambda t, y, ya, z, za, v, vd: np.full(np.shape(ya), co[6]),
        d_z=lambda t, y, ya, z, za, v, vd: q[3] * z,
        d_za=lambda t, y, ya, z, za, v, vd: np.full(np.shape(za), co[7]),
        d_v=lambda t, y, ya, z, za, v, vd: q[0] * v,
        d_vd=lambda t, y, ya, z, za, v, vd: q[1] * vd,
    )
    x1 = rng.uniform(-1.0, 1.0)
    problem = ControlProblem(
        grid=grid, f=f, l=l,
        kernel_y=ky, kernel_z=kz, kernel_v=kv,
        xi=lambda t, w: 1.0 + x1 * w,
        eta=0.0,
        control_history=lambda t: 0.3 * np.ones_like(t),
        convex=True,
        name=f"random-{seed}",
    )
    return problem, rng


def duality_gap_for(seed, n_paths=100, n_steps=40):
    """Duality gap of the variational solution of ``random_linear_control(seed)``."""
    from anticip_smp.smp import (
        control_path, direction_path, duality_check, evaluate, linearize, solve_adjoint, variational_solve,
    )

    problem, rng = random_linear_control(seed, n_steps)
    g = problem.grid
    incs = brownian_increments(g, n_paths, seed)
    u = control_path(problem, lambda t: 0.5 + 0.3 * np.cos(2 * t))
    _, state, _ = evaluate(problem, u, incs)
    lin = linearize(problem, u, state)
    p = solve_adjoint(problem, lin, incs)
    w = rng.uniform(1.0, 4.0)
    hat = variational_solve(problem, lin, direction_path(problem, lambda t: np.sin(w * t)), incs)
    return duality_check(problem, lin, p, hat.Y, hat.Z)
