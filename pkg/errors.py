"""Exception hierarchy shared by every CS-CRL module."""

from typing import Iterable, Optional


class CSCRLError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(CSCRLError):
    """Patch grid, token or partition shapes are inconsistent."""


class DegenerateMaskError(CSCRLError):
    """A mask partition leaves no visible or no masked tokens."""


class ConfigError(CSCRLError):
    """A configuration object violates its invariants."""


class CodecError(CSCRLError):
    """Base class for volume and checkpoint file errors."""


class BadMagicError(CodecError):
    pass


class TruncatedPayloadError(CodecError):
    pass


class UnsupportedVersionError(CodecError):
    pass


class DimensionOverflowError(CodecError):
    pass


class SchemaError(CodecError):
    """A checkpoint is missing a tensor, or carries a duplicate name."""


class ManifestError(CSCRLError):
    """Manifest parse failure.

    Args:
        message: Human readable description.
        row: 1-based data row number (header excluded), if the fault is row-local.
    """

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericError(CSCRLError):
    """NaN or Inf in activations, losses or gradients."""


class ContractError(CSCRLError):
    pass


class MetricError(CSCRLError):
    pass


class GradCheckError(CSCRLError):
    """Analytic and numeric gradients disagree beyond tolerance."""

    def __init__(self, failures: Iterable[str]):
        self.failures = list(failures)
        super().__init__(
            f"{len(self.failures)} parameter(s) exceed tolerance: "
            + ", ".join(self.failures)
        )


class UsageError(CSCRLError):
    """Command-line usage fault (maps to exit code 2)."""
