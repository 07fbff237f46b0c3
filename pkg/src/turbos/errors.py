"""Exception hierarchy shared by every module."""


class TurbosError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TurbosError, ValueError):
    pass


class DomainError(TurbosError, ValueError):
    pass


class NumericError(TurbosError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConfigError(TurbosError, ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ParseError(TurbosError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class CacheError(TurbosError):
    pass


class InputError(TurbosError, ValueError):
    pass


class CapacityError(TurbosError):
    pass


class PlanError(TurbosError, ValueError):
    pass


class TraceError(TurbosError):
    pass


class WeightsError(TurbosError):
    """Problem reading a weights file. ``code`` distinguishes the failure kind."""

    code = "weights"


class MagicError(WeightsError):
    code = "bad_magic"


class TruncatedError(WeightsError):
    code = "truncated"


class ManifestError(WeightsError):
    code = "bad_manifest"


class ShapeError(WeightsError):
    code = "shape_mismatch"

    def __init__(self, message: str, tensor: str):
        super().__init__(message)
        self.tensor = tensor
