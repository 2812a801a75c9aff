"""Exception taxonomy shared across the package.

CLI exit codes map onto these: ConfigError -> 2, DataError (and OSError) -> 3,
everything else raised at runtime -> 4.
"""


class IchSeqError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(IchSeqError):
    """Invalid configuration: bad window width, unknown backbone, malformed config file."""


class DataError(IchSeqError):
    """Invalid or inconsistent input data: shape mismatches, missing labels, unreadable studies."""


class UndefinedMetricError(IchSeqError):
    """A metric has no defined value, e.g. ROC-AUC when only one class is present."""


class NonFiniteLossError(IchSeqError):
    """Training loss became NaN/inf; carries a diagnostic dump of the failing step."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
