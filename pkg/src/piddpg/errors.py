"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ConfigError(ValueError):
    """A configuration or scenario profile is malformed.

    ``violations`` lists every problem found, each prefixed with the field path.
    """

    def __init__(self, message, violations=None):
        self.violations = list(violations or [])
        if self.violations:
            message = message + "\n  " + "\n  ".join(self.violations)
        super().__init__(message)


class ShapeError(ValueError):
    """Tensor shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or infinite value reached a layer or optimizer boundary."""


class StateError(RuntimeError):
    """An operation was called in a state that does not allow it."""
