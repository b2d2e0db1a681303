"""Exception hierarchy shared by every egosync module.

Each error carries an ``exit_code`` so the command-line front end can map
failures onto its documented exit-code table without a lookup of its own.
"""


class EgoSyncError(Exception):
    exit_code = 1


class ConfigError(EgoSyncError, ValueError):
    exit_code = 2


class ArtifactError(EgoSyncError):
    exit_code = 3


class MissingArtifact(ArtifactError, FileNotFoundError):
    pass


class VersionMismatch(ArtifactError):
    pass


class CorruptCheckpoint(ArtifactError):
    pass


class ParseError(ArtifactError, ValueError):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class DuplicateId(ArtifactError, ValueError):
    pass


class IoError(ArtifactError, OSError):
    pass


class NumericError(EgoSyncError, ValueError):
    exit_code = 4


class DegenerateSkeleton(NumericError):
    pass


class LengthMismatch(NumericError):
    pass


class EmptySequence(NumericError):
    pass


class InvalidShiftRange(NumericError):
    pass


class WindowOutOfRange(NumericError, IndexError):
    pass


class ZeroStd(UserWarning):
    """Issued, not raised: near-constant channels are centered but not scaled."""


class ShapeMismatch(NumericError):
    pass


class BatchMismatch(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, step, pair_ids, loss):
        super().__init__(
            f"non-finite loss {loss!r} at step {step}; pairs: {', '.join(pair_ids)}"
        )
        self.step = step
        self.pair_ids = list(pair_ids)


class ClipTooShort(NumericError):
    pass


class TooFewSamples(NumericError):
    pass


class DimensionMismatch(NumericError):
    pass


class DegenerateInput(NumericError):
    pass


class InsufficientSamples(NumericError):
    pass
