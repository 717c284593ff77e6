"""Exception types shared across the package."""


class ScgError(ValueError):
    """Base class for semantic causal graph validation failures."""


class ScgSyntaxError(ScgError):
    """A statement line does not follow the causal statement grammar."""


class UnknownNode(ScgError):
    """A statement references a node outside the candidate vocabulary."""


class CycleError(ScgError):
    """The induced edge graph contains a directed cycle (self-loops included)."""


class MixedTarget(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class RejectedEdit(Exception):
    """A proposed update could not be turned into a valid candidate."""


class BackendError(RuntimeError):
    pass


class TransientError(BackendError):
    """Retryable failure (rate limiting, 5xx, dropped connection)."""


class ScriptMiss(LookupError):
    """The scripted backend has no response for a request."""


class EnvelopeError(RuntimeError):
    """Guidance output is missing its <Causal Description> envelope."""


class ConfigError(ValueError):
    pass


class MissingField(KeyError):
    pass


class InsufficientData(ValueError):
    pass


class LengthMismatch(ValueError):
    pass
