"""Exception types shared across the toolkit."""


class MyqError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MyqError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(MyqError):
    """Invalid configuration value or combination."""


class UsageError(MyqError):
    """API misuse (empty inputs, double tape consumption, ...)."""


class FormatError(MyqError):
    """Malformed binary file. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateRangeError(MyqError):
    """Activation range has zero width; no affine quantizer exists."""


class BudgetError(MyqError):
    """Memory budget is infeasible. Carries the 1-bit floor size in MB."""

    def __init__(self, message, floor_mb=None):
        super().__init__(message)
        self.floor_mb = floor_mb


class AssemblyError(MyqError):
    """Quantized model assembly is missing required parameters."""


class CalibrationError(MyqError):
    """Calibration search failed to produce a usable scale."""
