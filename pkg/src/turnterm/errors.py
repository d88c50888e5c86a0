"""Exception hierarchy shared by every turnterm module."""


class TurntermError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""

    exit_code = 1


class ConfigInvalid(TurntermError):
    exit_code = 2


class MissingPrerequisite(TurntermError):
    exit_code = 3

    def __init__(self, stage, detail=""):
        self.stage = stage
        super().__init__(f"prerequisite missing for stage {stage!r}" + (f": {detail}" if detail else ""))


class JobFailure(TurntermError):
    exit_code = 4


# corpus
class ManifestError(TurntermError, ValueError):
    exit_code = 2


class MissingField(ManifestError):
    def __init__(self, record, field):
        self.record = record
        self.field = field
        super().__init__(f"record {record} is missing required field {field!r}")


class DuplicateSampleId(ManifestError):
    def __init__(self, sample_id):
        self.sample_id = sample_id
        super().__init__(f"duplicate sample_id {sample_id!r}")


class MalformedTime(ManifestError):
    pass


class NonPositiveDuration(TurntermError, ValueError):
    pass


class EmptyCorpus(TurntermError, ValueError):
    pass


class InvalidFraction(TurntermError, ValueError):
    pass


class TooFewShows(TurntermError, ValueError):
    pass


# preprocess
class MediaUnreadable(TurntermError, OSError):
    pass


class EmptyInterval(TurntermError, ValueError):
    pass


class ASRUnavailable(TurntermError, RuntimeError):
    pass


class ManualTranscriptMissing(TurntermError, KeyError):
    pass


class UnsupportedSetting(TurntermError, ValueError):
    pass


# encoders
class EmptyWaveform(TurntermError, ValueError):
    pass


class ProviderFailure(TurntermError, RuntimeError):
    pass


# heads / training
class MissingBaseModels(TurntermError, ValueError):
    pass


class BadDims(TurntermError, ValueError):
    pass


class MissingModality(TurntermError, ValueError):
    pass


class NonFiniteLoss(TurntermError, FloatingPointError):
    pass


class TooFewSamples(TurntermError, ValueError):
    pass


class MissingEmbedding(TurntermError, KeyError):
    pass


# analysis
class EmptyRecords(TurntermError, ValueError):
    pass


class UnequalRaterCounts(TurntermError, ValueError):
    pass


class TooFewRaters(TurntermError, ValueError):
    pass


class RankDeficientDesign(TurntermError, ValueError):
    pass


class NonNestedGrouping(TurntermError, ValueError):
    pass


class MaxIterationsExceeded(TurntermError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class UnconvergedFit(TurntermError, ValueError):
    pass


class MissingAnalysis(TurntermError):
    exit_code = 3
