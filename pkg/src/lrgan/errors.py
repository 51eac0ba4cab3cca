"""Shared exception types, mapped to CLI exit codes in cli.main."""


class UsageError(Exception):
    """Bad command line (exit code 1)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 2)."""


class TrainingDiverged(RuntimeError):
    """NaN/Inf loss; carries a diagnostic snapshot of the offending step (exit code 3)."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DataError(IOError):
    """Dataset/file problems, surfaced with path context (exit code 4)."""
