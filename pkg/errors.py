"""Exception hierarchy shared by every bdrrn module."""


class BdrrnError(Exception):
    """Base class for all input, validation and format errors."""


class ShapeError(BdrrnError):
    """Operands of a tensor operation have incompatible shapes."""

    def __init__(self, op: str, message: str) -> None:
        super().__init__(f"{op}: {message}")
        self.op = op


class GraphError(BdrrnError):
    """backward() was asked to differentiate something it cannot."""


class GradientMissingError(BdrrnError):
    """An optimizer step found a registered parameter without a gradient."""


class BatchNormStateError(BdrrnError):
    """Eval-mode batch norm was requested before running statistics exist."""


class PartitionError(BdrrnError):
    """A coding-unit partition is malformed or does not tile its frame.

    Attributes:
        kind: Short tag such as "overlap", "gap", "misaligned", "size", "syntax".
        x: Pixel column of the violation, when it has one.
        y: Pixel row of the violation, when it has one.
        line: 1-based line in the BPART stream, when parsed from text.
    """

    def __init__(
        self,
        kind: str,
        message: str,
        x: int | None = None,
        y: int | None = None,
        line: int | None = None,
    ) -> None:
        where = ""
        if line is not None:
            where += f"line {line}: "
        if x is not None and y is not None:
            message = f"{message} at ({x}, {y})"
        super().__init__(f"{where}{kind}: {message}")
        self.kind = kind
        self.x = x
        self.y = y
        self.line = line


class FormatError(BdrrnError):
    """A text or binary file does not follow its declared format."""

    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class CheckpointError(BdrrnError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared content."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor disagrees with the shape the config implies."""


class RDCurveError(BdrrnError):
    """A rate-distortion curve or curve pair cannot be used for BD-rate."""


class ConfigError(BdrrnError):
    """A model, training or run configuration is invalid."""


class DatasetError(BdrrnError):
    """A manifest or patch dataset is unusable."""


class TrainingDivergedError(BdrrnError):
    """The training loss became non-finite."""

    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
