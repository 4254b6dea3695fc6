"""Exception types shared across the package."""


class MMQError(Exception):
    """Base class for all package errors."""


class ValidationError(MMQError, ValueError):
    """Input data violates a structural constraint."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class ReducibleGeneratorError(ValidationError):
    """The environment generator is not irreducible."""

    def __init__(self, message, unreachable):
        super().__init__(message, [message])
        self.unreachable = sorted(unreachable)


class PolicyError(MMQError):
    """A scheduling policy or Markov control produced an invalid output."""

    def __init__(self, message, state=None):
        super().__init__(message if state is None else f"{message}; state={state}")
        self.state = state


class NumericalError(MMQError, ArithmeticError):
    """A numerical routine failed (singular system, non-convergence, ...)."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history or [])
