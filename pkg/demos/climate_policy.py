"""Climate policy under anticipated damages.

Compares the optimal policy under the two conventions for the adjoint
after the horizon. Holding ``p(T)`` keeps the forward average of the
adjoint large near ``T``. Zeroing it makes the policy the exact minimizer
of the discretized cost. The script prints both policies and their
stationarity residuals under the zero convention.

Run with ``python demos/climate_policy.py``.
"""

from anticip_smp.examples import build_example
from anticip_smp.smp import check_stationarity, cost_functional, evaluate, linearize, solve_adjoint, stationarity_process


def main():
    zero = build_example("climate", 200, extension="zero")
    hold = build_example("climate", 200, extension="hold")
    pb = zero.problem
    g = pb.grid
    u_zero, u_hold = zero.optimal_control(), hold.optimal_control()

    print("   t    u* (zero tail)   u* (held tail)")
    for t in (0.0, 0.25, 0.5, 0.75, 0.995):
        i = g.node(t)
        print(f"{t:6.3f} {u_zero.values[0, i]:14.6f} {u_hold.values[0, i]:16.6f}")

    for label, u in (("zero tail", u_zero), ("held tail", u_hold)):
        _, state, _ = evaluate(pb, u)
        lin = linearize(pb, u, state)
        G = stationarity_process(pb, lin, solve_adjoint(pb, lin))
        J = cost_functional(pb, u)
        print(f"{label}: J = {J:.6f}, stationarity violation {check_stationarity(G, u):.2e}")


if __name__ == "__main__":
    main()
