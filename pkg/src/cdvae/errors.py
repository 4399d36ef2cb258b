"""Exception types shared across the package.

Everything derives from CdvaeError so callers can catch package failures
with one except clause; the CLI maps them to exit code 1 with a message.
"""


class CdvaeError(Exception):
    """Base class for all package errors."""


# ---- feature I/O ----

class FormatError(CdvaeError):
    """Archive magic/version/domain byte is not what the format requires."""


class CorruptArchiveError(CdvaeError):
    """Archive is truncated or its payload disagrees with the header."""


class EmptyCorpusError(CdvaeError):
    """An operation that needs at least one utterance got none."""


class DomainMismatchError(CdvaeError):
    """SP/MCC domain of an input does not match what the operation expects."""


class DegenerateFrameError(CdvaeError):
    """A frame cannot be energy-normalized (nonpositive SP row sum)."""


class InvalidF0Error(CdvaeError):
    """Negative or non-finite F0 value where only 0 (unvoiced) or >0 is legal."""


class ConfigError(CdvaeError):
    """Bad or unknown configuration value; message carries the offending path."""


# ---- networks ----

class ShapeError(CdvaeError):
    """Tensor shape does not match the declared architecture."""


class SpeakerLookupError(CdvaeError):
    """Speaker id/index not present in the speaker table."""


# ---- objectives ----

class AlignmentError(CdvaeError):
    """Paired tensors disagree in time length where frame alignment is required."""


class IncompleteBreakdownError(CdvaeError):
    """A loss term required by the active mode is missing from a breakdown."""


# ---- training ----

class DivergenceError(CdvaeError):
    """Non-finite loss encountered; carries the path of the last good checkpoint."""

    def __init__(self, message: str, last_good_checkpoint: str | None = None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class CheckpointError(CdvaeError):
    """Checkpoint container is unreadable or does not match the model config."""


# ---- conversion ----

class PathUnavailableError(CdvaeError):
    """Requested conversion path needs a network the bundle does not have."""


# ---- evaluation ----

class EmptySequenceError(CdvaeError):
    """Metric input sequence has no frames at all."""


class NoFramesError(CdvaeError):
    """No non-silent frames survive masking; the metric is undefined."""


class TooShortError(CdvaeError):
    """Sequence too short for the transform (e.g. modulation spectrum needs T >= 2)."""


class NotParallelError(CdvaeError):
    """Utterance pair is not in the same parallel group."""
