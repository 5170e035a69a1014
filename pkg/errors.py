"""Exception hierarchy for the MTS-UNET toolkit."""

from pathlib import Path
from typing import Optional, Union


class MTSUNetError(Exception):
    """Base class for all toolkit errors."""


class ManifestError(MTSUNetError):
    """Raised when a case manifest cannot be parsed or validated."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None,
                 row: Optional[int] = None):
        self.path = str(path) if path is not None else None
        self.row = row
        location = []
        if self.path:
            location.append(self.path)
        if row is not None:
            location.append(f"row {row}")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(f"{prefix}{message}")


class CaseError(MTSUNetError):
    """Raised when a case's volumes are inconsistent with each other."""


class PhantomSpecError(MTSUNetError):
    """Raised when a phantom specification violates its invariants."""


class ShapeError(MTSUNetError):
    """Raised when a tensor does not satisfy a shape contract."""


class LabelError(MTSUNetError):
    """Raised when a mask holds labels outside the declared label set."""


class CheckpointError(MTSUNetError):
    """Raised when a checkpoint is missing metadata or does not match."""


class ConfigError(MTSUNetError):
    """Raised for invalid configuration values or combinations."""


class DomainError(MTSUNetError):
    """Raised when an input lies outside its mathematical domain."""


class EmptyMaskError(MTSUNetError):
    """Raised when a distance metric is requested on an empty mask."""


class DegenerateError(MTSUNetError):
    """Raised when a statistic is undefined for the given data."""


class DataError(MTSUNetError):
    """Raised when a task has no usable cases."""


class StratifyWarning(UserWarning):
    """Issued when a class is too small to be stratified across folds."""


class OutputExistsError(ConfigError):
    """Raised when an output path already exists and overwriting was not requested."""
