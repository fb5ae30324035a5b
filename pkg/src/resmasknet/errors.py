"""Exception hierarchy shared by every module."""


class ResMaskError(Exception):
    """Base class for all package errors."""


class ShapeError(ResMaskError, ValueError):
    pass


class InvalidShapeError(ShapeError):
    """A requested shape has a zero or negative dimension."""


class InvalidConfigError(ResMaskError, ValueError):
    """Layer hyper-parameters that cannot produce a valid output."""


class DegenerateBatchError(InvalidConfigError):
    pass


class ContractError(ResMaskError, ValueError):
    """A precondition on the call itself was violated."""


class MissingTapeError(ResMaskError, RuntimeError):
    """backward() on a tensor that was not produced by recorded ops."""


class BackwardTwiceError(ResMaskError, RuntimeError):
    pass


class NonFiniteError(ResMaskError, FloatingPointError):
    pass


class LabelError(ResMaskError, ValueError):
    pass


class BuildError(ResMaskError, ValueError):
    pass


class CheckpointError(ResMaskError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    pass


class ParseError(ResMaskError, ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class TrainingDivergedError(ResMaskError, RuntimeError):
    pass
