"""Two-layer point cloud geometry codec with learned residual refinement."""

from crcir.errors import CodecError, DecodeError, InvalidInputError, ModelMismatchError

__version__ = "0.1.0"

__all__ = [
    "CodecError",
    "DecodeError",
    "InvalidInputError",
    "ModelMismatchError",
    "__version__",
]
