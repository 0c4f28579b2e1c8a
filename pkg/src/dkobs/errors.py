"""Exception hierarchy shared by all modules."""


class DkobsError(Exception):
    """Base class for every error raised by the package."""


class InvalidEdge(DkobsError, ValueError):
    pass


class InvalidAgentIndex(DkobsError, IndexError):
    pass


class DimensionError(DkobsError, ValueError):
    pass


class InvalidParameter(DkobsError, ValueError):
    pass


class InvalidWindow(DkobsError, ValueError):
    pass


class SingularDynamics(DkobsError, ArithmeticError):
    """A dynamics block could not be inverted."""

    def __init__(self, k, agent=None):
        self.k = k
        self.agent = agent
        where = f"k={k}" if agent is None else f"agent {agent}, k={k}"
        super().__init__(f"singular dynamics matrix at {where}")


class TopologyMismatch(DkobsError, ValueError):
    pass


class NotSPD(DkobsError, ArithmeticError):
    def __init__(self, msg="matrix is not symmetric positive definite", k=None):
        self.k = k
        if k is not None:
            msg = f"{msg} (k={k})"
        super().__init__(msg)


class InconsistentLocalInfo(DkobsError, ArithmeticError):
    pass


class ProtocolError(DkobsError, RuntimeError):
    pass


class InternalInvariantViolation(DkobsError, AssertionError):
    pass


class InsufficientData(DkobsError, ValueError):
    pass


class UnobservableScenario(DkobsError, RuntimeError):
    pass


class ConfigError(DkobsError, ValueError):
    pass


class StepError(DkobsError, RuntimeError):
    """Wraps a solver failure with the observer step at which it happened."""

    def __init__(self, k, cause):
        self.k = k
        self.cause = cause
        super().__init__(f"step {k}: {type(cause).__name__}: {cause}")


class IoError(DkobsError, OSError):
    """A trace or summary could not be written or read."""
