"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import os
import subprocess
import sys
import time

import numpy as np

from anticip_smp.examples import build_example
from anticip_smp.gridrng import PathEnsemble, brownian_increments
from anticip_smp.iabsde import BackwardProblem, apriori_estimate_check, picard_solve
from anticip_smp.isdde import euler_maruyama, lq_adjoint_forward_problem, lq_adjoint_segments
from anticip_smp.smp import (
    check_stationarity,
    control_path,
    evaluate,
    gradient_check,
    linearize,
    solve_adjoint,
    solve_state,
    stationarity_process,
    sufficiency_probe,
)

from families import duality_gap_for, random_linear_bsde

# frozen from seeds 0-19 of the random linear family (largest ratio 4.47)
APRIORI_C = 9.0


def _verdict(label, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}")
    assert ok, detail


def _violation(case, u, incs=None):
    pb = case.problem
    est = case.estimator(incs)
    _, state, _ = evaluate(pb, u, incs, est)
    lin = linearize(pb, u, state)
    G = stationarity_process(pb, lin, solve_adjoint(pb, lin, incs), incs, est)
    return check_stationarity(G, u, pb.u_lo, pb.u_hi)


def test_criterion_1_consumption_closed_form():
    start = time.perf_counter()
    case = build_example("consumption", 2000)
    pb = case.problem
    g = pb.grid
    # the pipeline at the closed-form optimum, then c* from the computed adjoint
    u = case.optimal_control()
    _, state, _ = evaluate(pb, u)
    p = solve_adjoint(pb, linearize(pb, u, state))
    c = case.control_from_adjoint(p)
    elapsed = time.perf_counter() - start
    t = g.times
    sl = slice(g.zero, g.end + 1)
    p_err = np.abs(p.values[0, sl] + np.cosh(t[sl])).max()
    ctrl = g.control_nodes
    c_err = np.abs(c.values[0, ctrl] - np.cosh(t[ctrl]) ** -2).max()
    ok = p_err <= 5e-3 and c_err <= 5e-3 and elapsed < 5.0
    _verdict("1", ok, f"p error {p_err:.2e}, c* error {c_err:.2e}, {elapsed:.2f} s")


def test_criterion_2_lq_cross_validation():
    start = time.perf_counter()
    args = (0.1, 0.2, 0.3, 0.1, 0.25)
    levels = [80, 160, 320, 640]
    finest = build_example("lq", levels[-1]).problem.grid
    incs = brownian_increments(finest, 10_000, seed=2024)
    hs, errs = [], []
    for n in levels:
        g = build_example("lq", n).problem.grid
        sub = incs.coarsen(levels[-1] // n)
        em = euler_maruyama(lq_adjoint_forward_problem(*args, g), g, sub).values[:, g.end]
        ref = lq_adjoint_segments(*args, g, sub).values[:, g.end]
        hs.append(g.h)
        errs.append(np.sqrt(np.mean((em - ref) ** 2)))
    rate = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    elapsed = time.perf_counter() - start
    shrinks = all(b < a for a, b in zip(errs, errs[1:]))
    ok = shrinks and 0.35 <= rate <= 0.65 and elapsed < 60.0
    _verdict("2", ok, f"rate {rate:.3f}, errors {', '.join(f'{e:.2e}' for e in errs)}, {elapsed:.1f} s")


def test_criterion_3_stationarity_at_optima():
    cases = {
        "consumption": build_example("consumption", 500),
        "climate": build_example("climate", 200),
        "lq": build_example("lq", 100, C=0.0, D=0.0),
    }
    parts, ok = [], True
    for name, case in cases.items():
        pb = case.problem
        u = case.optimal_control()
        viol = _violation(case, u)
        shifted = PathEnsemble(pb.grid, u.values + 0.1)
        shift_viol = _violation(case, shifted)
        bound = 10 * pb.grid.h * case.scale
        good = viol <= bound and shift_viol >= 10 * viol
        ok &= good
        parts.append(f"{name} {viol:.1e}<={bound:.1e}, shifted {shift_viol:.1e}")
    _verdict("3", ok, "; ".join(parts))


def test_criterion_4_discrete_duality():
    start = time.perf_counter()
    gaps = [duality_gap_for(seed, n_paths=100) for seed in range(20)]
    elapsed = time.perf_counter() - start
    ok = max(gaps) <= 1e-12 and elapsed < 5.0
    _verdict("4", ok, f"max relative gap {max(gaps):.1e} over 20 problems, {elapsed:.2f} s")


def test_criterion_5_variational_gradient():
    case = build_example("lq", 100)
    pb = case.problem
    incs = brownian_increments(pb.grid, 10_000, seed=11)
    est = case.estimator(incs)
    # J is flat at u*, so the check runs at a control where the gradient is O(1)
    u = control_path(pb, 0.0, incs.n_paths)
    d = lambda t: np.sin(np.pi * t)
    _, _, rel4 = gradient_check(pb, u, d, 1e-4, incs, est)
    _, _, rel3 = gradient_check(pb, u, d, 1e-3, incs, est)
    slack = 1e-3
    ok = rel4 <= 1e-2 and rel3 >= rel4 - slack
    _verdict("5", ok, f"rel error {rel4:.2e} at eps 1e-4, {rel3:.2e} at eps 1e-3")


def test_criterion_6_picard_contraction():
    case = build_example("consumption", 500)
    u = case.optimal_control()
    _, sweeps, hist = solve_state(case.problem, u, tol=1e-10, max_iter=30)
    ratios = np.array(hist[1:]) / np.array(hist[:-1])
    ok = bool(np.all(ratios < 1)) and hist[-1] < 1e-10 and sweeps <= 30
    _verdict("6", ok, f"{sweeps} sweeps, max ratio {ratios.max():.3f}, final residual {hist[-1]:.1e}")


def test_criterion_7_apriori_estimate():
    ratios = []
    for seed in range(20):
        prob, g, incs = random_linear_bsde(seed)
        sol, _, _ = picard_solve(prob, g, incs, case_estimator(), tol=1e-12, max_iter=80)
        ratios.append(apriori_estimate_check(prob, sol, g)[2])
    prob, g, incs = random_linear_bsde(0)
    zero = BackwardProblem(lambda t, y, ya, z, za, v, vd: 0.0 * y, 0.0, 0.0, prob.kernel_y, prob.kernel_z)
    sol, _, _ = picard_solve(zero, g, incs, case_estimator())
    lhs, rhs, _ = apriori_estimate_check(zero, sol, g)
    ok = max(ratios) <= APRIORI_C and lhs == 0.0 and rhs == 0.0
    _verdict("7", ok, f"max lhs/rhs {max(ratios):.2f} <= C={APRIORI_C}, zero data lhs={lhs} rhs={rhs}")


def case_estimator():
    from anticip_smp.estimators import PolyRegression

    return PolyRegression(2)


def test_criterion_8_sufficiency_probe():
    parts, ok = [], True
    for name, n, paths in (("consumption", 500, None), ("climate", 200, None), ("lq", 100, 2000)):
        case = build_example(name, n)
        pb = case.problem
        incs = brownian_increments(pb.grid, paths, seed=5) if paths else None
        est = case.estimator(incs)
        u = case.optimal_control(incs, est)
        pairs = sufficiency_probe(pb, u, 50, 0.1, seed=1, incs=incs, estimator=est)
        slack = 10 * pb.grid.h * case.scale * 0.1
        worst = min(b - a for a, b in pairs)
        ok &= worst >= -slack
        parts.append(f"{name} min increase {worst:.1e} (slack {slack:.1e})")
    _verdict("8", ok, "; ".join(parts))


def test_criterion_9_determinism(tmp_path):
    outputs = []
    for threads in ("1", "4"):
        out = tmp_path / f"threads{threads}"
        env = dict(os.environ, ANTICIP_SMP_THREADS=threads)
        cmd = [sys.executable, "-m", "anticip_smp.cli", "run", "--example", "lq", "--n", "40",
               "--paths", "2000", "--seed", "9", "--out-dir", str(out)]
        proc = subprocess.run(cmd, env=env, capture_output=True, text=True)
        outputs.append((proc.returncode, {p.name: p.read_bytes() for p in sorted(out.iterdir())}))
    (code_a, files_a), (code_b, files_b) = outputs
    ok = code_a == code_b == 0 and files_a == files_b and set(files_a) == {"nodes.csv", "summary.json"}
    _verdict("9", ok, f"exit codes {code_a}/{code_b}, files {sorted(files_a)} identical={files_a == files_b}")
