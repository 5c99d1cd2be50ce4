class ESMError(Exception):
    """Base class for all package errors."""


class DomainError(ESMError, ValueError):
    pass


class DataValidationError(ESMError, ValueError):
    """Bad input data; ``row`` is 1-based when known."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class ConfigError(ESMError, ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class TrainingError(ESMError, RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, index: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.index = index


class DesignError(ESMError, ValueError):
    pass


class InferenceError(ESMError, ValueError):
    pass


class FormatError(ESMError, ValueError):
    """Unreadable or incompatible model file."""
