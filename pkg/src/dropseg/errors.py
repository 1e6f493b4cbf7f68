"""Exception hierarchy shared across the toolkit.

Everything a user can trigger with bad input derives from :class:`DropsegError`;
the CLI maps those to exit code 1.
"""


class DropsegError(Exception):
    """Base class for user-facing errors."""


class InvariantViolation(Exception):
    """An internal consistency check failed (CLI exit code 2)."""


class ShapeMismatch(DropsegError, ValueError):
    pass


class IndexOutOfRange(DropsegError, IndexError):
    pass


class ZeroVarianceVolume(DropsegError, ValueError):
    pass


class EmptyStudy(DropsegError, ValueError):
    pass


class CorruptVolumeFile(DropsegError, ValueError):
    pass


class ManifestError(DropsegError, ValueError):
    pass


class NotOnTape(DropsegError, ValueError):
    pass


class AllCensored(DropsegError, ValueError):
    pass


class MissingSequence(DropsegError, ValueError):
    pass


class MissingGroundTruth(DropsegError, ValueError):
    pass


class TrainingDiverged(DropsegError, RuntimeError):
    pass


class CorruptCheckpoint(DropsegError, ValueError):
    pass


class PlacementFailure(DropsegError, RuntimeError):
    pass


class DegenerateGroundTruth(DropsegError, ValueError):
    pass


class DegenerateCurve(DropsegError, ValueError):
    pass


class EmptyInput(DropsegError, ValueError):
    pass


class NonFiniteInput(DropsegError, ValueError):
    pass


class EmptySample(DropsegError, ValueError):
    pass


class EnumerationTooLarge(DropsegError, ValueError):
    pass


class ConfigError(DropsegError, ValueError):
    pass
