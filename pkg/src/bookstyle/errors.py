"""Exception types raised across the package."""


class BookstyleError(Exception):
    """Base class for all package errors."""


class ConfigError(BookstyleError):
    pass


# corpus / features
class EmptyAudio(BookstyleError):
    pass


class SampleRateMismatch(BookstyleError):
    pass


class UnknownUtterance(BookstyleError, KeyError):
    pass


class AlignmentMismatch(BookstyleError):
    pass


class PhonemizeError(BookstyleError):
    pass


class FeatureCacheError(BookstyleError):
    pass


# text style encoder
class BadWindow(BookstyleError):
    pass


class EmptyCorpus(BookstyleError):
    pass


class ContrastiveBatchTooSmall(BookstyleError):
    pass


# models
class ShapeMismatch(BookstyleError, ValueError):
    pass


class UnknownPhoneme(BookstyleError):
    pass


class EmptyExpansion(BookstyleError):
    pass


class MissingTargets(BookstyleError):
    pass


class FrozenContractViolation(BookstyleError):
    pass


class CheckpointMissing(BookstyleError, FileNotFoundError):
    pass


class CheckpointError(BookstyleError):
    pass


# pipeline / evaluation
class StageOrderViolation(BookstyleError):
    pass


class NoVoicedOverlap(BookstyleError):
    pass
