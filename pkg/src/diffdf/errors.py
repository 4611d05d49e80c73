"""Exception hierarchy shared by every command.

Each error class carries the process exit code the CLI reports for it.
"""

from __future__ import annotations

from typing import Any, Mapping


class DiffDfError(Exception):
    """Base class for errors raised by the purification pipeline."""

    exit_code = 4


class ConfigError(DiffDfError, ValueError):
    """Raised when a configuration value is missing, malformed or unknown."""

    exit_code = 2


class DataError(DiffDfError):
    """Raised when a dataset, manifest or image cannot be used."""

    exit_code = 3


class CheckpointError(DataError):
    """Raised when a checkpoint has the wrong format or schedule binding."""


class NumericalError(DiffDfError, ArithmeticError):
    """Raised when a loss or gradient stops being finite."""

    exit_code = 4

    def __init__(self, message: str, diagnostics: Mapping[str, Any] | None = None):
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)
