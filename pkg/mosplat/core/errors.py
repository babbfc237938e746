"""
Exception types raised across the engine.
"""
from typing import Iterable, Optional


class MosplatError(Exception):
    """Base class for all engine errors."""


class NonFiniteError(MosplatError, FloatingPointError):
    """A NaN/Inf appeared in a forward or backward value."""

    def __init__(self, operation: str, detail: str = ""):
        self.operation = operation
        message = f"Non-finite value produced by '{operation}'"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class ShapeMismatchError(MosplatError, ValueError):
    """Two tensors that must agree in shape do not."""

    def __init__(self, what: str, expected, found):
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(f"{what}: expected shape {self.expected}, found {self.found}")


class CheckpointFormatError(MosplatError, ValueError):
    """A checkpoint file is corrupt or of an unsupported version."""

    def __init__(self, field: str, expected, found):
        self.field = field
        self.expected = expected
        self.found = found
        super().__init__(f"Checkpoint {field} mismatch: expected {expected!r}, found {found!r}")


class DatasetError(MosplatError, ValueError):
    """A dataset directory violates the layout contract."""

    def __init__(self, message: str, files: Optional[Iterable[str]] = None):
        self.files = sorted(str(f) for f in (files or []))
        if self.files:
            message = f"{message} (offending files: {', '.join(self.files)})"
        super().__init__(message)


class FrustumError(MosplatError, ValueError):
    """A synthetic object leaves the camera frustum."""

    def __init__(self, object_id: int, frame: int, reason: str = "outside frustum"):
        self.object_id = object_id
        self.frame = frame
        super().__init__(f"Object {object_id} {reason} at frame {frame}")


class ObjectAbsent(MosplatError, LookupError):
    """An object has no mask pixels in a frame."""

    def __init__(self, object_id: Optional[int] = None, frame: Optional[int] = None):
        self.object_id = object_id
        self.frame = frame
        super().__init__(f"Object {object_id} absent at frame {frame}")


class DivergenceError(MosplatError, FloatingPointError):
    """Optimization produced a non-finite loss and was aborted."""

    def __init__(self, stage: str, step: int, breakdown: Optional[dict] = None):
        self.stage = stage
        self.step = step
        self.breakdown = dict(breakdown or {})
        terms = ", ".join(f"{k}={v}" for k, v in self.breakdown.items())
        super().__init__(f"{stage} diverged at step {step} [{terms}]")
