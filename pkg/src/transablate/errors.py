"""Exception hierarchy shared across the package."""


class TransablateError(Exception):
    """Base class for all package errors."""


class ShapeError(TransablateError, ValueError):
    """Tensor or graph shapes are incompatible."""

    def __init__(self, message: str, node_id: str | None = None):
        self.node_id = node_id
        if node_id is not None:
            message = f"[{node_id}] {message}"
        super().__init__(message)


class ConfigError(TransablateError, ValueError):
    """Invalid hyperparameters for a block or model."""


class UsageError(TransablateError, ValueError):
    """An operation was called outside its preconditions."""


class NonFiniteError(TransablateError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ValidationError(TransablateError, ValueError):
    """A graph spec failed structural validation."""

    def __init__(self, message: str, ids: list[str] | None = None):
        self.ids = list(ids or [])
        if self.ids:
            message = f"{message}: {', '.join(self.ids)}"
        super().__init__(message)


class ParseError(TransablateError, ValueError):
    """Malformed serialized graph text."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        super().__init__(f"{message} (line {line}, column {column})")


class CompatError(TransablateError):
    """Ablated graph does not preserve downstream tensor shapes."""


class TrainingDivergence(TransablateError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, epoch: int, fold: int):
        self.epoch = epoch
        self.fold = fold
        super().__init__(f"{message} (fold {fold}, epoch {epoch})")


class GenerationError(TransablateError):
    """Synthetic data could not be generated within the retry budget."""
