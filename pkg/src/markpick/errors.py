"""Exception taxonomy shared across the package."""


class MarkpickError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MarkpickError):
    """Invalid or missing configuration."""


class ManifestError(MarkpickError):
    """Malformed or invalid split manifest."""


class EmptyManifestError(ManifestError):
    """Operation requires a non-empty manifest."""


class ImageDecodeError(MarkpickError):
    """Image bytes could not be decoded."""


class SubjectParseError(MarkpickError):
    """No usable subject phrase survived parsing of a model reply."""


class DegenerateBoxError(MarkpickError):
    """Box lost its positive area after clipping to the image frame."""


class TransportError(MarkpickError):
    """Base class for wire-level failures."""


class TransientTransportError(TransportError):
    """Retryable failure: connection trouble, timeout, 429, 5xx."""


class AuthenticationError(TransportError):
    """Endpoint rejected the credentials (401/403). Not retryable."""


class MalformedResponseError(TransportError):
    """Endpoint answered with a payload that does not match the wire contract."""


class RetriesExhaustedError(TransportError):
    """Transient failures persisted beyond the configured retry budget."""


class BackendError(MarkpickError):
    """Detector backend failure (unreachable endpoint, error payload)."""


class BackendContractError(BackendError):
    """Detector backend response violates the wire contract."""


class MetricsError(MarkpickError):
    """Invalid metrics input (empty record list, id mismatch, out-of-range value)."""


class FailureCeilingError(MarkpickError):
    """Per-sample failure rate exceeded the configured ceiling for a split run.

    Carries the partial results so callers can still persist what completed.
    """

    def __init__(self, message: str, results=None):
        super().__init__(message)
        self.results = results if results is not None else []
