"""Exception hierarchy for the d3pm package."""


class D3PMError(Exception):
    """Base class for all d3pm errors."""


class InvalidSpecError(D3PMError):
    """A transition spec (or its parameters) is malformed."""


class UnsupportedFamilyError(D3PMError):
    """An operation was asked for a matrix family it does not support."""


class ScheduleError(D3PMError):
    """A noise schedule could not be constructed from the given parameters."""


class MIGridError(ScheduleError):
    """The mutual-information grid cannot reach a requested corruption target."""


class UnreachableStateError(D3PMError):
    """A (x_t, x_0) pair has zero forward probability.

    Raised instead of returning a fallback distribution: an unreachable
    pair indicates an inconsistent schedule/matrix combination or a caller
    bug, and silently papering over it would hide the defect.
    """


class DataError(D3PMError):
    """A dataset could not be generated or ingested."""


class CheckpointError(D3PMError):
    """A checkpoint file is corrupt, incompatible, or mismatched."""


class TrainingDivergedError(D3PMError):
    """The training loss exploded past the configured abort threshold."""
