"""Exception hierarchy shared across the platform."""


class FedcareError(Exception):
    """Base class for all platform errors."""


class ValidationError(FedcareError):
    """A precondition on caller-supplied data failed."""


class EmptyDataset(FedcareError):
    """A training or evaluation dataset contained no rows."""


class SchemaMismatch(FedcareError):
    """Feature vector, model, or dataset does not match the active schema."""


class DecodeError(FedcareError):
    """A serialized payload could not be decoded."""


class DivergenceError(FedcareError):
    """Training produced a non-finite loss or parameters."""


class KeygenError(FedcareError):
    """Key generation failed to find an acceptable matrix."""


class MergeError(FedcareError):
    """Encrypted datasets with incompatible metadata cannot be merged."""


class AuthError(FedcareError):
    """Caller is not authorized for the requested operation."""


class DuplicateEdge(FedcareError):
    """An edge id is already registered and active."""


class StaleRound(FedcareError):
    """A federation update referenced a round that is no longer current."""


class ProtocolError(FedcareError):
    """A federation message arrived outside the expected protocol state."""


class NotFound(FedcareError):
    """The requested entity does not exist."""


class UnknownAggregator(FedcareError):
    """Payload source is not a configured data aggregator."""


class FeatureDisabled(FedcareError):
    """The operation requires a feature this node is not configured for."""


class HETimeout(FedcareError):
    """An encrypted inference request did not complete within the poll budget."""


class SurrogateTrainingTimeout(FedcareError):
    """Encrypted labelling did not complete within the poll budget."""


class TransportError(FedcareError):
    """The cloud could not be reached."""
