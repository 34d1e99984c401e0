"""Exception hierarchy shared across the pipeline.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3.
"""


class VgregError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(VgregError):
    """Invalid configuration: bad field values, dimension mismatches, unknown modes."""


class DataError(VgregError):
    """Invalid input data: unreadable files, empty clouds, missing records."""


class FormatError(DataError):
    """A binary/structured file failed validation.

    ``code`` is a short machine-readable tag ("bad magic", "bad version",
    "bad dtype", "truncated tensor data", ...) so callers can distinguish
    failure modes without parsing the message.
    """

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(message or code)


class StageError(VgregError):
    """Failure inside a pipeline stage; carries the stage label for reports."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")
