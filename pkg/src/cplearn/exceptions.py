"""Exception hierarchy shared by every module."""


class CPLError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CPLError, ValueError):
    """Invalid hyperparameter, unknown option, or malformed config document."""


class PreconditionError(CPLError, ValueError):
    """An operation was called with arguments outside its contract."""


class InvalidTransitionError(PreconditionError):
    """An action was applied to a state that does not offer it."""


class DivergenceError(CPLError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class NumericError(CPLError, ArithmeticError):
    """A log-probability or loss came out non-finite."""


class DegenerateRoundError(CPLError, RuntimeError):
    """A generation round produced no correct path at all."""


class ParseError(CPLError, ValueError):
    """A persisted record could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SearchError(CPLError, RuntimeError):
    """Wraps a failure raised inside a search simulation."""

    def __init__(self, message, simulation):
        super().__init__(f"simulation {simulation}: {message}")
        self.simulation = simulation


class UnavailableError(CPLError, ConnectionError):
    """Remote generator unreachable after all retries."""


class ProtocolError(CPLError, ValueError):
    """Remote generator answered with a malformed body."""
