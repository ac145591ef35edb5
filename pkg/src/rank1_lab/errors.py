"""Exception hierarchy shared across the package."""


class Rank1LabError(Exception):
    """Base class for every error raised by rank1_lab."""


# linear algebra
class LinalgError(Rank1LabError, ValueError):
    pass


class NonFiniteInput(LinalgError):
    pass


class NonConvergence(LinalgError):
    pass


class DegenerateMatrix(LinalgError):
    pass


class ShapeMismatch(LinalgError):
    pass


class ZeroNorm(LinalgError):
    pass


class AllZero(LinalgError):
    pass


# checkpoints
class CheckpointError(Rank1LabError):
    pass


class CheckpointIOError(CheckpointError, OSError):
    pass


class MalformedHeader(CheckpointError, ValueError):
    pass


class TruncatedPayload(CheckpointError, ValueError):
    pass


class DuplicateName(CheckpointError, ValueError):
    pass


class EmptyIntersection(CheckpointError, ValueError):
    pass


# spectral analysis
class DegenerateDelta(DegenerateMatrix):
    pass


class TooFewValues(Rank1LabError, ValueError):
    pass


# policy model
class TokenOutOfRange(Rank1LabError, ValueError):
    pass


class SequenceTooLong(Rank1LabError, ValueError):
    pass


class TapeMismatch(Rank1LabError, ValueError):
    pass


# tasks
class GenerationTimeout(Rank1LabError, RuntimeError):
    pass


class DomainError(Rank1LabError, ValueError):
    pass


# RL engine
class MissingReference(Rank1LabError, ValueError):
    pass


class ResampleCapExceeded(Rank1LabError, RuntimeError):
    pass


class NaNLoss(Rank1LabError, FloatingPointError):
    pass


# alignment probe
class RankMismatch(Rank1LabError, ValueError):
    pass


class ConfigError(Rank1LabError, ValueError):
    pass
