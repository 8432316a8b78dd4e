class VentweanError(Exception):
    """Base class for all package errors."""


class ConfigError(VentweanError, ValueError):
    pass


class ParseError(VentweanError, ValueError):
    """A malformed row in an input file."""

    def __init__(self, path, line, field, message):
        self.path = str(path)
        self.line = line
        self.field = field
        super().__init__(f"{self.path}:{line}: field {field!r}: {message}")


class ValidationError(VentweanError, ValueError):
    pass


class NumericalError(VentweanError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    pass


class ArtifactError(VentweanError):
    """Schema-version or config-hash mismatch between pipeline artifacts."""


class TrainingError(VentweanError):
    """A regressor failed inside an iterative learner."""

    def __init__(self, iteration, message):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")
