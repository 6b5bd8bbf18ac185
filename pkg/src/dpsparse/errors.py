"""Exception taxonomy shared across the package.

Every error the library raises deliberately is one of these, so the CLI can
map failure categories to exit codes without string matching.
"""


class DPSparseError(Exception):
    """Base class for all deliberate errors."""


class ConfigurationError(DPSparseError):
    """Invalid hyperparameters, schema violations, shape mismatches."""


class DataFormatError(DPSparseError):
    """Malformed dataset files; message carries the byte offset when known."""


class NumericalError(DPSparseError):
    """Non-finite values surfaced during computation; names the layer."""


class CalibrationError(DPSparseError):
    """Noise calibration could not meet the target within search bounds."""
