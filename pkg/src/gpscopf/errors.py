"""Exception types shared across the package."""


class GpscopfError(Exception):
    """Base class for all package errors."""


class CaseError(GpscopfError):
    """Malformed or inconsistent network case / dynamics data.

    Carries an optional source position so parser errors point at the
    offending line of the input document.
    """

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            where = f"line {line}" + (f", col {column}" if column is not None else "")
            message = f"{message} ({where})"
        super().__init__(message)


class PowerFlowError(GpscopfError):
    """Newton power flow failed (singular Jacobian or divergence)."""


class SolveError(GpscopfError):
    """NLP solve aborted for a reason other than plain non-optimality."""


class InitError(GpscopfError):
    """Generator steady-state initialization failed."""


class SimulationError(GpscopfError):
    """Time-domain integration failed (step-size underflow)."""


class FitError(GpscopfError):
    """Nonlinear least-squares fit could not be performed."""


class ModelIOError(GpscopfError):
    """GP model document is unreadable or incompatible."""
