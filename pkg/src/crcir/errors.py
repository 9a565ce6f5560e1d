class CodecError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(CodecError, ValueError):
    pass


class DecodeError(CodecError):
    """A coded stream is truncated, corrupt, or inconsistent with its tables."""


class ModelMismatchError(CodecError):
    """Bitstream was produced with different weights than the loaded model."""


class StateError(CodecError, RuntimeError):
    pass


class TrainingDivergedError(CodecError, RuntimeError):
    pass
