"""Shared exception types. Exit-code mapping lives in the CLI."""


class XmrecError(Exception):
    """Base class for all package errors."""


class ConfigError(XmrecError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(XmrecError):
    """Malformed input data or artifacts (CLI exit code 3)."""


class ShapeError(DataError):
    """Tensor shape mismatch; message names the offending graph node."""


class NumericError(XmrecError):
    """Non-finite values or diverged training (CLI exit code 4)."""

    def __init__(self, message, breakdown=None, checkpoint=None):
        super().__init__(message)
        self.breakdown = breakdown
        self.checkpoint = checkpoint
