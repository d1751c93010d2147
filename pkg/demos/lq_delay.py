"""Point-delay linear-quadratic problem with noise.

First checks the Euler-Maruyama adjoint against the segment-wise closed
form as the step is halved. Then evaluates the stochastic optimal control,
whose conditional expectations come from polynomial regression, and
reports its stationarity residual next to that of a shifted control.

Run with ``python demos/lq_delay.py``.
"""

import numpy as np

from anticip_smp.examples import build_example
from anticip_smp.gridrng import PathEnsemble, brownian_increments
from anticip_smp.isdde import euler_maruyama, lq_adjoint_forward_problem, lq_adjoint_segments
from anticip_smp.smp import check_stationarity, evaluate, linearize, solve_adjoint, stationarity_process

COEFS = (0.1, 0.2, 0.3, 0.1, 0.25)


def strong_errors(levels, n_paths=4000, seed=1):
    finest = build_example("lq", levels[-1]).problem.grid
    incs = brownian_increments(finest, n_paths, seed)
    out = []
    for n in levels:
        g = build_example("lq", n).problem.grid
        sub = incs.coarsen(levels[-1] // n)
        em = euler_maruyama(lq_adjoint_forward_problem(*COEFS, g), g, sub).values[:, g.end]
        ref = lq_adjoint_segments(*COEFS, g, sub).values[:, g.end]
        out.append((g.h, float(np.sqrt(np.mean((em - ref) ** 2)))))
    return out


def violation(case, u, incs, est):
    pb = case.problem
    _, state, _ = evaluate(pb, u, incs, est)
    lin = linearize(pb, u, state)
    G = stationarity_process(pb, lin, solve_adjoint(pb, lin, incs), incs, est)
    return check_stationarity(G, u)


def main():
    errs = strong_errors([80, 160, 320, 640])
    for h, e in errs:
        print(f"h = {h:.5f}   RMS error at T = {e:.3e}")
    rate = np.polyfit(np.log([h for h, _ in errs]), np.log([e for _, e in errs]), 1)[0]
    print(f"fitted strong rate {rate:.3f}\n")

    case = build_example("lq", 100)
    incs = brownian_increments(case.problem.grid, 2000, seed=4)
    est = case.estimator(incs)
    u = case.optimal_control(incs, est)
    print(f"stationarity violation at u*:       {violation(case, u, incs, est):.3e}")
    shifted = PathEnsemble(u.grid, u.values + 0.1)
    print(f"stationarity violation at u* + 0.1: {violation(case, shifted, incs, est):.3e}")


if __name__ == "__main__":
    main()
