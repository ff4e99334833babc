"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Inconsistent or invalid configuration."""


class ShapeError(ValueError):
    """Tensor or array dimensions do not match what an operation expects."""


class FormatError(ValueError):
    """A binary or text file does not follow its declared layout.

    ``offset`` is the byte offset (or line number for text formats) at which
    reading failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionMismatchError(FormatError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a loss becomes non-finite during training."""

    def __init__(self, epoch: int, batch: int, components: dict):
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {parts}")
        self.epoch = epoch
        self.batch = batch
        self.components = components
