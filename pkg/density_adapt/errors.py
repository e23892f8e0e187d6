"""Exception hierarchy for density-adapt.

Every error carries the exit code the CLI returns when it escapes a command.
"""

from pathlib import Path
from typing import Optional


class DensityAdaptError(Exception):
    """Base class for all density-adapt errors."""

    exit_code: int = 1


class ConfigError(DensityAdaptError):
    """Invalid configuration or command-line usage."""

    exit_code = 2


class DataError(DensityAdaptError):
    """Dataset, annotation or split problem."""

    exit_code = 3


class AnnotationError(DataError):
    """A point annotation violates the image bounds."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class DatasetLoadError(DataError):
    """A dataset file is missing or unreadable."""

    def __init__(self, message: str, path: Optional[Path] = None):
        super().__init__(message)
        self.path = path


class DatasetParseError(DataError):
    """An annotation file is not valid JSON or fails validation."""

    def __init__(self, message: str, path: Path, lineno: Optional[int] = None):
        super().__init__(message)
        self.path = path
        self.lineno = lineno


class ShapeError(DataError):
    """A tensor or map violates a shape contract."""


class CheckpointError(DataError):
    """A checkpoint archive is malformed or built for another architecture."""


class NumericalError(DensityAdaptError):
    """A loss became NaN or infinite during training."""

    exit_code = 4

    def __init__(self, message: str, step: int, snapshot: Optional[Path] = None):
        super().__init__(message)
        self.step = step
        self.snapshot = snapshot
