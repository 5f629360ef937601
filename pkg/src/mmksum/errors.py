"""Exception hierarchy shared across the package."""


class MmkError(Exception):
    """Base class for all package errors."""


class DimensionError(MmkError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(MmkError):
    """Non-finite values or numerically degenerate inputs."""


class ContractError(MmkError):
    """An operation was called outside its documented contract."""


class ConfigError(MmkError):
    """Invalid model/training/decoding configuration."""


class SchemaError(MmkError):
    """Malformed data file. Carries line/field context when available."""

    def __init__(self, message, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        if loc:
            message = f"{': '.join(loc)}: {message}" if len(loc) == 1 else \
                f"{loc[0]}, {loc[1]}: {message}"
        super().__init__(message)
        self.line = line
        self.field = field


class DatasetError(MmkError):
    """Dataset lacks something a requested operation needs."""


class ReproducibilityError(MmkError):
    """A function that must be deterministic produced differing results."""


class StepUnderflowError(MmkError):
    """Finite-difference step too small to perturb f64 parameters."""


class CheckpointError(MmkError):
    """Unreadable, corrupt, or version-incompatible checkpoint."""
