"""Exception types raised across the package."""


class FocusError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(FocusError):
    pass


class NonFiniteValue(FocusError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ZeroNormRow(FocusError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"row {index} has (near-)zero L2 norm")


class InsufficientShots(FocusError):
    def __init__(self, label: int, available: int, requested: int):
        self.label = label
        self.available = available
        self.requested = requested
        super().__init__(
            f"class {label} has only {available} train bags, need {requested}"
        )


class MissingGradient(FocusError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"parameter {name!r} has no accumulated gradient")


class MissingClass(FocusError):
    def __init__(self, label: int):
        self.label = label
        super().__init__(f"class {label} absent from labels")


class DegenerateAUC(FocusError):
    def __init__(self, label: int):
        self.label = label
        super().__init__(
            f"class {label} needs at least one positive and one negative example"
        )


class BadMagic(FocusError):
    pass


class TruncatedFile(FocusError):
    def __init__(self, path: str, offset: int, expected: int):
        self.offset = offset
        self.expected = expected
        super().__init__(
            f"{path}: truncated at byte {offset}, expected {expected} bytes"
        )


class NonFiniteLoss(FocusError):
    """Training loss became NaN/Inf; the fold is aborted."""


class ConfigError(FocusError):
    """Invalid or inconsistent run configuration."""
