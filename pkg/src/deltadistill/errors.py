"""Exception types shared across the pipeline."""


class DeltaDistillError(Exception):
    """Base class for all pipeline errors."""


class EmptyCorpus(DeltaDistillError):
    """Raised when a corpus or dataset contains no usable tokens."""


class EmptyDataset(DeltaDistillError):
    """Raised when a training dataset contains no examples."""


class EmptyResponse(DeltaDistillError):
    """Raised when a zero-length response is submitted for scoring."""


class IoFailure(DeltaDistillError):
    """Raised when reading or writing an artifact fails."""


class MalformedRecord(DeltaDistillError):
    """Raised on an unparseable or invalid dataset record.

    Carries the 1-based line number of the offending record.
    """

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class VocabularyMismatch(DeltaDistillError):
    """Raised when token data was built against a different vocabulary."""


class InvalidRuleParameters(DeltaDistillError):
    """Raised on filter-rule parameters outside their valid range."""


class ParseFailure(DeltaDistillError):
    """Raised when no prompt items can be extracted from generator output."""


class BudgetExceeded(DeltaDistillError):
    """Raised when an exact-enumeration request exceeds the sequence budget."""


class DivergenceDetected(DeltaDistillError):
    """Raised when a training loss becomes non-finite."""


class ConfigError(DeltaDistillError):
    """Raised on an invalid or incomplete run configuration."""


class Timeout(DeltaDistillError):
    """Raised when a remote request exceeds its deadline (retryable)."""


class AuthFailure(DeltaDistillError):
    """Raised on authentication/authorization errors (not retryable)."""


class RateLimited(DeltaDistillError):
    """Raised when the remote endpoint throttles the request (retryable)."""


class ProtocolError(DeltaDistillError):
    """Raised on malformed remote responses; carries a response excerpt."""


class UnsupportedEndpoint(DeltaDistillError):
    """Raised when the endpoint cannot score a provided continuation."""
