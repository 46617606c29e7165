"""Exception types shared across the toolkit."""


class CashewEdgeError(Exception):
    """Base class for all toolkit errors."""


class DomainError(CashewEdgeError, ValueError):
    """An input value lies outside the mathematical domain of an operation."""


class ContractError(CashewEdgeError, ValueError):
    """A caller violated an interface contract (shape, dtype, missing params)."""


class CalibrationError(CashewEdgeError):
    """Calibration could not produce usable activation statistics."""


class ConversionError(CashewEdgeError):
    """Float-to-int8 model conversion failed."""


class TrainingError(CashewEdgeError):
    """Head training hit a non-recoverable condition (bad labels, NaN loss)."""


class ModelFormatError(CashewEdgeError):
    """Base class for model (de)serialization failures."""


class BadMagicError(ModelFormatError):
    """The file does not start with the expected magic bytes."""


class UnsupportedVersionError(ModelFormatError):
    """The file carries a format version this build cannot read."""


class TruncatedFileError(ModelFormatError):
    """The file ends before the manifest or a weight blob is complete."""


class ManifestMismatchError(ModelFormatError):
    """Manifest metadata disagrees with the actual blob contents."""
