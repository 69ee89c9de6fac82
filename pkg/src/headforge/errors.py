"""Exception types shared across the engine."""


class HeadforgeError(Exception):
    """Base class for all engine errors."""


class InvalidRangeError(HeadforgeError, ValueError):
    """A sampling interval is empty or out of bounds."""


class ShapeError(HeadforgeError, ValueError):
    """Tensor arguments disagree in shape."""


class MeshValidationError(HeadforgeError, ValueError):
    """A mesh violates watertightness or contains degenerate faces."""


class MeshParseError(HeadforgeError, ValueError):
    """An OBJ or sidecar file could not be parsed."""

    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class PoisonedParameterError(HeadforgeError, ValueError):
    """Field parameters contain NaN/Inf."""


class PoisonedGradientError(HeadforgeError, ValueError):
    """A score provider returned a non-finite gradient."""


class ContractViolationError(HeadforgeError, ValueError):
    """An internal invariant was violated by a caller (e.g. negative density)."""


class ExtractionError(HeadforgeError, ValueError):
    """Marching tetrahedra hit a degenerate tet."""


class TransportError(HeadforgeError, RuntimeError):
    """Retriable failure talking to a remote score provider."""


class ProtocolVersionError(HeadforgeError, RuntimeError):
    """The remote provider speaks an incompatible protocol version. Fatal."""


class CheckpointError(HeadforgeError, RuntimeError):
    """Base for checkpoint container failures."""


class CheckpointVersionError(CheckpointError):
    """Unsupported container format version. Fatal."""


class CheckpointIntegrityError(CheckpointError):
    """Checksum mismatch / truncated container."""
