"""Exception taxonomy shared across the engine.

The CLI maps these onto its stable exit codes: usage/config errors exit 2,
I/O and file-format errors exit 3, provider/transport errors exit 4, and
verification failures exit 1.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class UsageError(EngineError):
    """An API or CLI precondition was violated by the caller."""


class DomainError(UsageError):
    """A query point lies outside the field's declared domain."""


class ConfigError(UsageError):
    """A configuration value is missing, malformed, or inconsistent."""


class CheckpointError(EngineError):
    """Base class for checkpoint load/save failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, version, or structural framing in a checkpoint file."""


class CheckpointLengthError(CheckpointError):
    """Checkpoint payload shorter than the header promises (truncation)."""


class CheckpointHashError(CheckpointError):
    """Checkpoint was written under a different config hash."""


class ProviderError(EngineError):
    """A guidance provider failed to produce a usable response."""


class ProviderCapabilityError(ProviderError):
    """Provider does not support the requested guidance kind."""


class TransportError(ProviderError):
    """Network-level failure talking to a remote provider."""


class TransportTimeoutError(TransportError):
    """Remote provider did not answer within the configured timeout."""


class VersionMismatchError(TransportError):
    """Remote endpoint speaks a different protocol version; never retried."""


class PayloadError(TransportError):
    """Malformed or truncated wire payload."""


class RemoteModelError(ProviderError):
    """The remote service accepted the request but its model failed."""


class NonFiniteLossError(EngineError):
    """Training produced a NaN or Inf loss; run aborted with a dump."""


class NonDeterministicLossError(EngineError):
    """A loss function changed value across repeated evaluation under a
    fixed seed, which invalidates finite-difference verification."""
