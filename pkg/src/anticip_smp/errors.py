"""Exception hierarchy shared by the solvers."""


class AnticipSmpError(Exception):
    """Base class for all errors raised by this package."""


class LagMisaligned(AnticipSmpError, ValueError):
    """A lag is not an integer multiple of the grid step."""


class TailTooWide(AnticipSmpError, ValueError):
    """A truncated kernel reaches beyond the grid's history/future extension."""


class IndexUnderflow(AnticipSmpError, IndexError):
    """A delayed lookup falls before the first stored node."""


class IndexOverflow(AnticipSmpError, IndexError):
    """An anticipated lookup falls after the last stored node."""


class NonFinite(AnticipSmpError, FloatingPointError):
    """A state became NaN or infinite during time stepping."""


class RegressionSingular(AnticipSmpError, ArithmeticError):
    """Normal equations of a regression estimator are rank deficient."""


class EstimatorMismatch(AnticipSmpError, ValueError):
    """The deterministic estimator received path-dependent data."""


class NoConvergence(AnticipSmpError, RuntimeError):
    """Picard iteration hit ``max_iter`` before reaching the tolerance."""

    def __init__(self, message, residual_history=()):
        super().__init__(message)
        self.residual_history = list(residual_history)


class SignAssumptionViolated(AnticipSmpError, ValueError):
    """The anticipated adjoint average is not strictly negative."""
