"""
Exception hierarchy shared by every module of the package.
The CLI maps these onto process exit codes (see main.py).
"""

from typing import Optional


class ProtoShiftError(Exception):
    """Base class for every error raised on purpose by this package"""


class ConfigError(ProtoShiftError, ValueError):
    """Invalid run configuration or hyperparameter"""


class NumericalError(ProtoShiftError, ValueError):
    """Non-finite values, degenerate inputs or a numerical abort"""

    def __init__(self, message: str, checkpoint_path: Optional[str] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class StaleCacheError(NumericalError):
    """Backward pass called with a cache from an older parameter version"""


class DataFormatError(ProtoShiftError, ValueError):
    """Malformed external data file"""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(ProtoShiftError):
    """Unreadable, corrupted or incompatible checkpoint"""
