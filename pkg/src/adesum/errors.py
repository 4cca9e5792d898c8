"""Exception types shared across the pipeline."""


class AdesumError(Exception):
    """Base class for all pipeline errors."""


class IngestError(AdesumError):
    """Malformed or duplicate input record; carries the offending line."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TransportError(AdesumError):
    """Backend transport failure. Safe to retry."""

    retryable = True


class ModelOutputError(AdesumError):
    """Model returned output we could not parse; keeps the raw text."""

    def __init__(self, message, raw_output=""):
        super().__init__(message)
        self.raw_output = raw_output


class ValidationError(AdesumError):
    """Input violates an operation precondition."""


class NotFoundError(AdesumError):
    """Addressed entity does not exist."""


class ConflictError(AdesumError):
    """Write rejected: stale version or duplicate. Refresh and retry."""

    def __init__(self, message, code="conflict"):
        super().__init__(message)
        self.code = code
