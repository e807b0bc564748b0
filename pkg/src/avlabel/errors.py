"""Exception types shared across the pipeline."""


class LabelerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LabelerError):
    """Invalid configuration: bad parameter values, duplicate rules, etc."""


class MalformedRecordError(LabelerError):
    """A scan-report record is missing required fields or is unparseable."""


class CorpusError(LabelerError):
    """The input corpus as a whole is unusable."""


class EmptyDetectionError(LabelerError):
    """A detection string contains no alphanumeric characters."""


class UndefinedTokenError(LabelerError):
    """Co-occurrence lookup was asked about a token with no report count."""


class EmptyInstanceError(LabelerError):
    """No report in the corpus carries any family vote."""


class InternalConsistencyError(LabelerError):
    """A vote references a family outside the co-occurrence support."""


class TrainingError(LabelerError):
    """Confidence-model training cannot proceed on the given examples."""


class ScoringError(LabelerError):
    """Confidence-model scoring received incompatible input."""


class StageError(LabelerError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
