"""Numerical toolkit for optimal control of BSDEs with infinite anticipation
and delay: grids and counter-based noise, measure kernels, forward delayed
SDE and backward anticipated BSDE solvers, and maximum-principle checks."""

from .errors import (
    AnticipSmpError,
    EstimatorMismatch,
    IndexOverflow,
    IndexUnderflow,
    LagMisaligned,
    NoConvergence,
    NonFinite,
    RegressionSingular,
    SignAssumptionViolated,
    TailTooWide,
)
from .estimators import ConditionalEstimator, Deterministic, NestedMC, PolyRegression
from .gridrng import (
    IncrementEnsemble,
    PathEnsemble,
    TimeGrid,
    brownian_increments,
    extend_with_history,
    make_grid,
)
from .iabsde import BackwardProblem, StatePair, apriori_estimate_check, backward_euler_pass, picard_solve
from .isdde import (
    ForwardProblem,
    consumption_adjoint_closed_form,
    euler_maruyama,
    lq_adjoint_forward_problem,
    lq_adjoint_segments,
)
from .kernels import (
    DelayKernel,
    MeasureSpec,
    adjoint_pairing_check,
    anticipate_all,
    anticipate_apply,
    delay_all,
    delay_apply,
    discretize_measure,
)
from .smp import (
    ControlProblem,
    Hamiltonian,
    Smooth,
    SmpReport,
    assemble_adjoint,
    check_stationarity,
    control_path,
    cost_functional,
    duality_check,
    gradient_check,
    linearize,
    smp_report,
    solve_adjoint,
    stationarity_process,
    sufficiency_probe,
    variational_solve,
)

__version__ = "0.1.0"
