"""Exception taxonomy shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class ParameterError(ValueError):
    """A numeric parameter is outside its admissible range."""


class GraphError(RuntimeError):
    """A computation-graph contract was violated (e.g. non-scalar backward root)."""


class EvaluationError(RuntimeError):
    """A checked function produced a non-finite value."""


class ConfigError(ValueError):
    """Invalid configuration. Carries the offending line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MappingError(ValueError):
    """A dataset id has no entry in the active dataset-to-expert mapping."""


class DegenerateBatchError(ValueError):
    """Every token of a batch was masked out of a loss that needs at least one."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""
