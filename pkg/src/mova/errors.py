"""Exception hierarchy. Every error raised by the library derives from MovaError."""


class MovaError(Exception):
    """Base class for all library errors."""


class ShapeError(MovaError):
    """Operand dimensions are incompatible."""


class ValidationError(MovaError):
    """A config, registry, or data file violates its schema or invariants."""


class NumericError(MovaError):
    """A computation produced or encountered a non-finite value."""


class EmptySupportError(MovaError):
    """Softmax was asked to normalize over an empty support."""


class CapacityError(MovaError):
    """A planted signal does not fit the target feature geometry."""


class RoutingError(MovaError):
    """Base class for routing-stage failures."""


class UnknownExpertError(RoutingError):
    """A response referenced a letter outside the registry."""


class EmptyResponseError(RoutingError):
    """No expert letters could be extracted from a response."""


class MissingContextError(RoutingError):
    """A routing strategy was invoked without its required context."""


class EmptySelectionError(MovaError):
    """Gate weights were requested for an empty expert selection."""


class FeatureMismatchError(MovaError):
    """A routed expert has no matching feature map."""


class TrainingError(MovaError):
    """Toy training diverged or failed its gradient check."""


class PipelineError(MovaError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
