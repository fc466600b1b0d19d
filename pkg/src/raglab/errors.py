"""Exception types shared across the package."""


class RaglabError(Exception):
    """Base class for all errors raised by raglab."""


class InvalidDocument(RaglabError):
    """Raised for empty or otherwise unchunkable input documents."""


class ParseError(RaglabError):
    """Raised on malformed serialized records; carries the offending line number."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyInput(RaglabError):
    """Raised when text tokenizes to an empty sequence where tokens are required."""


class DimensionError(RaglabError):
    """Raised on mismatched embedding dimensions."""


class EmptyIndex(RaglabError):
    """Raised when searching an index with no rows."""


class ContextOverflow(RaglabError):
    """Raised when a token sequence cannot fit the model context window."""


class InvalidAnswer(RaglabError):
    """Raised when scoring a zero-length answer."""


class MaskError(RaglabError):
    """Raised on malformed label masks in training batches."""


class EmptyGeneration(RaglabError):
    """Raised when every ensemble member decodes an empty string."""


class RetrievalRequired(RaglabError):
    """Raised when a task category needs retrieval but no retriever is available."""


class TemplateError(RaglabError):
    """Raised for unknown categories/templates or missing template fields."""


class InvalidMixture(RaglabError):
    """Raised when mixture weights are all zero or otherwise unusable."""


class NoEligibleChunks(RaglabError):
    """Raised when no chunk in the store is long enough for self-supervised splitting."""


class ContractViolation(RaglabError):
    """Raised when a frozen component is about to be trained."""


class ConfigError(RaglabError):
    """Raised for inconsistent or unknown configuration keys/values."""


class ArtifactMissing(RaglabError):
    """Raised when an experiment references a checkpoint or file that does not exist."""
