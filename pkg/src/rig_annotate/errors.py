"""Exception hierarchy.

Every domain failure derives from :class:`RigAnnotateError` so callers (and the
CLI) can separate bad input from programming errors with a single ``except``.
"""


class RigAnnotateError(Exception):
    """Base class for all domain errors raised by this package."""


class FrameMismatch(RigAnnotateError):
    pass


class EmptyInput(RigAnnotateError):
    pass


class OutOfRange(RigAnnotateError):
    pass


class TooFewPoints(RigAnnotateError):
    pass


class TooFewPoses(RigAnnotateError):
    pass


class DegenerateConfiguration(RigAnnotateError):
    pass


class DegenerateMotion(RigAnnotateError):
    pass


class NoCorrespondences(RigAnnotateError):
    pass


class EmptyMesh(RigAnnotateError):
    pass


class EmptyScene(RigAnnotateError):
    pass


class TimestampMismatch(RigAnnotateError):
    pass


class NonPositiveStep(RigAnnotateError):
    pass


class InsufficientOverlap(RigAnnotateError):
    pass


class NegativeError(RigAnnotateError):
    pass


class InvalidConfig(RigAnnotateError):
    pass


class UnknownObject(RigAnnotateError):
    pass


class InvalidGeometry(RigAnnotateError):
    pass


class NoConvergenceWarning(RuntimeWarning):
    """Emitted when an iterative estimator stops at its iteration cap."""


class FormatError(RigAnnotateError):
    """Malformed input file. ``str()`` yields ``path:line: message``."""

    def __init__(self, message: str, path=None, line=None):
        self.message = message
        self.path = None if path is None else str(path)
        self.line = line
        super().__init__(self._render())

    def _render(self) -> str:
        loc = self.path or "<input>"
        if self.line is not None:
            loc = f"{loc}:{self.line}"
        return f"{loc}: {self.message}"
