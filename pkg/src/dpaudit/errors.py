"""Exception types shared across the toolkit."""


class DpAuditError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(DpAuditError, ValueError):
    """Tensor shapes do not compose."""


class ParameterError(DpAuditError, ValueError):
    """A numeric parameter is outside its valid domain."""


class CalibrationError(DpAuditError, RuntimeError):
    """Noise calibration could not reach the requested budget."""


class TrainingError(DpAuditError, RuntimeError):
    """Training produced a non-finite value or diverged."""


class ConfigError(DpAuditError, ValueError):
    """An experiment configuration is malformed."""
