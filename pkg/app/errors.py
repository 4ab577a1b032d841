"""Exception hierarchy shared by every depthcast module."""
from typing import Optional


class DepthcastError(Exception):
    """Base class for all errors raised by the engine."""


class DomainError(DepthcastError, ValueError):
    """An input violates an operation's precondition."""


class ShapeError(DomainError):
    """Array dimensions disagree."""


class BehindCameraError(DomainError):
    """A point with Z <= 0 cannot be projected."""


class DivergenceError(DepthcastError):
    def __init__(self, message: str, step: Optional[int] = None, segment: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.segment = segment


class DegenerateAlignmentError(DepthcastError):
    """Trajectory alignment has no unique solution."""


class EmptyEvaluationError(DepthcastError):
    """No valid pixels remain after masking."""


class FormatError(DepthcastError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.path = path
        self.offset = offset
