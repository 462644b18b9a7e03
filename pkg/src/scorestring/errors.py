"""Exception types raised across the package."""


class StringMethodError(Exception):
    """Base class for all errors raised by scorestring."""


class ConfigurationError(StringMethodError, ValueError):
    """Invalid configuration: unknown names, violated invariants, broken contracts."""


class DomainError(StringMethodError, ValueError):
    """An argument lies outside the domain of the operation."""


class SingularTimeError(StringMethodError, ValueError):
    """The velocity/score conversion is singular at the requested time."""


class CapabilityError(StringMethodError, TypeError):
    """The field oracle lacks a capability the operation needs."""


class DivergenceError(StringMethodError, FloatingPointError):
    """Non-finite state encountered during integration.

    Carries the time of failure, the last finite state and, where it makes
    sense, the index of the offending image or walker.
    """

    def __init__(self, message, t=None, last_state=None, index=None):
        super().__init__(message)
        self.t = t
        self.last_state = last_state
        self.index = index


class TrainingDivergenceError(StringMethodError, FloatingPointError):
    def __init__(self, message, iteration):
        super().__init__(message)
        self.iteration = iteration


class BranchAmbiguityError(StringMethodError, ValueError):
    """A rotation increment is too close to pi for a unique axis-angle."""


class DegenerateTangentError(StringMethodError, ValueError):
    pass


class BudgetExceededError(StringMethodError, RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual
