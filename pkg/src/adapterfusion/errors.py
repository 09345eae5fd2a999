"""Exception hierarchy shared across the package."""


class AdapterFusionError(Exception):
    """Base class for all package errors."""


class ConfigError(AdapterFusionError, ValueError):
    pass


class DataError(AdapterFusionError, ValueError):
    pass


class UsageError(AdapterFusionError, RuntimeError):
    pass


class DimensionError(AdapterFusionError, ValueError):
    pass


class NumericError(AdapterFusionError, FloatingPointError):
    pass


class CompatibilityError(AdapterFusionError):
    """Checkpoint or member structure does not match the target backbone."""


class FormatError(AdapterFusionError):
    """Malformed or truncated checkpoint file."""


class CheckError(AdapterFusionError):
    """Gradient check could not be carried out (e.g. non-deterministic program)."""


class BudgetError(AdapterFusionError):
    pass


class ArtifactError(AdapterFusionError):
    """A required upstream artifact is missing or an output would be clobbered."""
