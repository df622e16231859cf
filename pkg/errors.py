"""Exception hierarchy shared by every module.

Validation errors also derive from ValueError so callers that only know
the standard library still catch them; the CLI maps them to exit code 1.
"""


class NidsError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(NidsError, ValueError):
    """Input or configuration is invalid; maps to CLI exit code 1."""


class SchemaError(ValidationError):
    """CSV header or feature schema does not match what was declared."""


class LabelError(ValidationError):
    """A raw class label is not present in the class table."""


class SpecError(ValidationError):
    """A synthetic pattern or perturbation spec violates its invariants."""


class ConfigError(ValidationError):
    """One or more configuration keys are invalid.

    Args:
        problems: every violated key with a short reason
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ShapeError(ValidationError):
    """Tensor shapes are incompatible for an operation."""


class UsageError(ValidationError):
    """An API was called out of order (backward without a tape, extra iterations)."""


class NumericError(NidsError, ArithmeticError):
    """A forward operation produced a non-finite value."""


class DivergenceError(NidsError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        where = ""
        if epoch is not None:
            where = f" (epoch {epoch}, batch {batch})"
        super().__init__(f"{message}{where}")


class NotFittedError(NidsError):
    """A classifier was used before training."""


class ModelFormatError(NidsError):
    """A model file cannot be read."""


class FormatVersionError(ModelFormatError):
    """A model file was written with an unsupported format version."""


class ChecksumError(ModelFormatError):
    """A model file is truncated or its content does not match its checksum."""
