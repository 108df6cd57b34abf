"""Exception types shared across the pipeline."""


class Step2HeartError(Exception):
    """Base class for all package errors."""


class ConfigError(Step2HeartError, ValueError):
    """Invalid configuration value. ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class InputError(Step2HeartError, ValueError):
    """Invalid data passed to an operation."""


class ShapeError(Step2HeartError, ValueError):
    """Array dimensions do not agree."""


class CohortIOError(Step2HeartError, OSError):
    """A cohort or artifact file is missing or cannot be parsed."""


class TrainingError(Step2HeartError, RuntimeError):
    """Non-finite loss or gradient during optimisation."""


class MissingArtifactError(Step2HeartError, FileNotFoundError):
    """An upstream pipeline stage has not produced its artifacts yet."""

    def __init__(self, message, stage):
        super().__init__(message)
        self.stage = stage
