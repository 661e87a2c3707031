"""Exception hierarchy.

Every error carries a short machine-readable ``category`` which the CLI
prints on stderr.
"""


class SpineCompleteError(Exception):
    category = "error"


class DimensionMismatchError(SpineCompleteError, ValueError):
    category = "dimension-mismatch"


class InvalidInputError(SpineCompleteError, ValueError):
    category = "invalid-input"


class EmptyMaskError(SpineCompleteError, ValueError):
    category = "empty-mask"


class EmptyCloudError(SpineCompleteError, ValueError):
    category = "empty-cloud"


class ZeroAreaMeshError(SpineCompleteError, ValueError):
    category = "zero-area-mesh"


class SizeMismatchError(SpineCompleteError, ValueError):
    """Clouds must share a cardinality (resample upstream)."""

    category = "size-mismatch"


class SolverCapError(SpineCompleteError, ValueError):
    category = "solver-cap"


class UndefinedCorrelationError(SpineCompleteError, ValueError):
    category = "undefined-correlation"


class ConfigError(SpineCompleteError, ValueError):
    category = "config"


class CheckpointError(SpineCompleteError, ValueError):
    category = "checkpoint"


class CodecError(SpineCompleteError, ValueError):
    """Base class for file decoding problems; ``offset`` is a byte offset when known."""

    category = "codec"

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class PlyHeaderError(CodecError):
    category = "ply-malformed-header"


class PlyTruncatedError(CodecError):
    category = "ply-truncated"


class PlyUnsupportedError(CodecError):
    category = "ply-unsupported-format"


class PlyValueError(CodecError):
    category = "ply-invalid-value"


class PngDecodeError(CodecError):
    category = "png-decode"


class PngFormatError(CodecError):
    category = "png-format"


class JsonFormatError(CodecError):
    category = "json-format"
