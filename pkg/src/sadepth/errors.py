class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class ProtocolError(RuntimeError):
    """Raised when an evaluation protocol cannot be applied (e.g. no valid GT)."""


class NonFiniteLossError(FloatingPointError):
    """Raised by the trainer when a step produces a NaN/inf loss."""

    def __init__(self, message, batch_id=None, dump_path=None):
        super().__init__(message)
        self.batch_id = batch_id
        self.dump_path = dump_path
