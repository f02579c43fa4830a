"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


class DegenerateEmbedding(ValueError):
    pass


class FormatError(ValueError):
    """A grid or checkpoint file failed validation.

    ``field`` names the offending manifest key or payload region.
    """

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class NumericError(ArithmeticError):
    def __init__(self, message, checkpoint=None):
        if checkpoint is not None:
            message = f"{message} (last good checkpoint: {checkpoint})"
        super().__init__(message)
        self.checkpoint = checkpoint
