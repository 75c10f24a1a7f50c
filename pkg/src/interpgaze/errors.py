"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see cli.EXIT_CODES).
"""


class InterpGazeError(Exception):
    """Base class for all package errors."""


class ValidationError(InterpGazeError, ValueError):
    """Invalid parameters, shapes, or out-of-range values."""


class EstimationFailureError(InterpGazeError, RuntimeError):
    """The gaze oracle could not locate an iris region."""


class DatasetError(InterpGazeError, RuntimeError):
    """Empty dataset, unloadable directory, or no valid pair under the sampling mode."""


class UnreachableAttributeError(InterpGazeError, ValueError):
    """A desired attribute offset cannot be expressed because source and target agree."""


class ControlRangeError(InterpGazeError, ValueError):
    """A control-vector component exceeds the configured maximum."""


class NonFiniteLossError(InterpGazeError, RuntimeError):
    """A loss term became NaN or infinite; the message names the term."""


class CheckpointError(InterpGazeError, RuntimeError):
    """Missing, corrupt, or incompatible checkpoint archive."""
