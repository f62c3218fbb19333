"""Exception hierarchy shared across the engine."""


class GramError(Exception):
    """Base class for every error raised by the engine."""


class ConfigError(GramError, ValueError):
    """A configuration value violates its invariant."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericError(GramError, ArithmeticError):
    pass


class CheckpointError(GramError):
    pass


class CheckpointCorruptError(CheckpointError):
    """File is not parseable JSON."""


class CheckpointSchemaError(CheckpointError):
    """File parses but does not match the checkpoint schema."""


class CheckpointVersionError(CheckpointError):
    """File declares a schema version this build cannot read."""


class ShapeError(GramError, ValueError):
    """Spatial dimensions cannot flow through a layer."""

    def __init__(self, layer, message):
        self.layer = layer
        super().__init__(f"{layer}: {message}")


class StateError(GramError):
    """Operation requires a state the object is not in (e.g. unannotated spec)."""


class CostModelError(GramError):
    pass


class EvaluatorError(GramError):
    """Base for evaluator failures. `request_id` is None outside a request."""

    def __init__(self, message, request_id=None):
        self.request_id = request_id
        super().__init__(message if request_id is None else f"[request {request_id}] {message}")


class EvaluatorSpawnError(EvaluatorError):
    pass


class EvaluatorTimeout(EvaluatorError):
    pass


class MalformedReply(EvaluatorError):
    pass


class EvaluatorCrashed(EvaluatorError):
    """Child exited (or closed stdout) before replying."""

    def __init__(self, message, request_id=None, returncode=None):
        self.returncode = returncode
        super().__init__(message, request_id)


class IdMismatch(EvaluatorError):
    pass


class ProtocolVersionError(EvaluatorError):
    pass


class SearchAborted(GramError):
    """Evaluator failure budget exhausted."""
