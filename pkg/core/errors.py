"""Exception types shared across the pipeline.

Everything derives from a built-in so callers can keep catching ValueError /
RuntimeError. The CLI maps the ValueError family to exit code 2 and the
RuntimeError family to exit code 3.
"""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Argument outside the domain of an operation (empty input, K too large, ...)."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration."""


class CsvParseError(ValueError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


# --- binary file formats (KB + checkpoint) ---
class KBFormatError(ValueError):
    """Base class for malformed KB / checkpoint files."""


class BadMagicError(KBFormatError):
    pass


class VersionMismatchError(KBFormatError):
    def __init__(self, found: int, expected: int, what: str = "file"):
        super().__init__(f"{what} version mismatch: found {found}, expected {expected}")
        self.found = found
        self.expected = expected


class ChecksumError(KBFormatError):
    pass


class TruncatedFileError(KBFormatError):
    pass


class EncoderMismatchError(KBFormatError):
    pass


# --- runtime failures ---
class GradCheckError(RuntimeError):
    pass


class NonFiniteGradientError(RuntimeError):
    def __init__(self, param_name: str):
        super().__init__(f"Non-finite gradient in parameter '{param_name}'; step aborted")
        self.param_name = param_name


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"Training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss
