"""Exception types that map onto the CLI exit codes."""

__all__ = ["UsageError", "DataFormatError", "DivergenceError", "CheckpointError"]


class UsageError(Exception):
    """Bad command line or missing required argument (exit code 1)."""


class DataFormatError(ValueError):
    """Malformed dataset file or unusable data request (exit code 2)."""


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint container (exit code 2)."""


class DivergenceError(RuntimeError):
    """Training produced NaN/Inf loss (exit code 3)."""
