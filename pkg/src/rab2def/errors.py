"""Exception types shared across the simulator."""


class ShapeError(ValueError):
    """Input dimensions do not match the model or dataset layout."""


class EmptyInputError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Local training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss during epoch {epoch}")


class FormatError(ValueError):
    """Malformed dataset file (bad magic, truncated stream, count mismatch)."""


class InsufficientDataError(ValueError):
    pass


class ConfigError(ValueError):
    pass
