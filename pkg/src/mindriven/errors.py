"""Exception taxonomy shared by all modules.

Three branches map onto the CLI exit codes: ``ValidationError`` (2, bad
configuration or malformed input), ``NumericalAbort`` (3, a run that started
but tripped a numerical guard), and ``PreconditionError`` (4, a documented
operation precondition was violated).
"""
from __future__ import annotations


class MinDrivenError(Exception):
    exit_code = 1


class ValidationError(MinDrivenError):
    exit_code = 2


class ConfigError(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class NumericalAbort(MinDrivenError):
    exit_code = 3


class MassOverflowError(NumericalAbort):
    """Total first moment would exceed the 64-bit budget kept for exact counts."""


class NoCrossingError(NumericalAbort):
    """The active component failed to reach zero within the segment time budget."""


class StiffnessError(NumericalAbort):
    """The adaptive step size underflowed or the stepper gave up."""


class TruncationOverflowError(NumericalAbort):
    """First-moment mass past the truncation cap exceeded the overflow budget."""


class NegativeClampError(NumericalAbort):
    """A component went below -tol_neg; carries a diagnostics dict."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PreconditionError(MinDrivenError):
    exit_code = 4


class EmptyStateError(PreconditionError):
    """Operation needs at least one particle."""


class TerminalStateError(PreconditionError):
    """Jump operations need at least two particles."""


class ZeroMassError(PreconditionError):
    """Initial data has zero (or non-finite) first moment."""


class MissingSizeOneError(PreconditionError):
    """Admissible deterministic initial data must put mass on size 1."""


class PrefixViolationError(PreconditionError):
    """A vector field for minimal size i was fed a state with x_j != 0, j < i."""


class ReplayMismatchError(PreconditionError):
    """Trajectory lacks the stored variates the representation replay needs."""


class StepTooLargeError(PreconditionError):
    """Expected event count over [0, h] is too large for a first-order check."""


class DominanceError(PreconditionError):
    """Sorted-size domination S_m(y0) <= S_m(x0) fails; carries the first index."""

    def __init__(self, message: str, first_violation: int):
        super().__init__(message)
        self.first_violation = first_violation


class TooCloseToSwitchError(PreconditionError):
    """Finite-difference window would cross a switch time."""


class MissingDeltaError(PreconditionError):
    """Kernel declares no lower-bound sequence delta_i."""


class MissingWeightsError(PreconditionError):
    """Fast-kernel blow-up check needs declared Lyapunov weights."""


class InfeasibleDiscretizationError(PreconditionError):
    """Deterministic rounding cannot realize the first moment exactly."""


class HorizonError(PreconditionError):
    """Requested horizon exceeds the computed deterministic solution."""
