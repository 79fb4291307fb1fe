"""Exception types raised across the package."""


class PoseNormError(Exception):
    """Base class for all package errors."""


class DegenerateBody(PoseNormError):
    pass


class ZeroVector(PoseNormError):
    pass


class ShapeMismatch(PoseNormError):
    pass


class DivergenceDetected(PoseNormError):
    def __init__(self, message, losses=None):
        super().__init__(message)
        self.losses = list(losses or [])


class EmptyEval(PoseNormError):
    pass


class TooFewPoints(PoseNormError):
    pass


class CanvasTooSmall(PoseNormError):
    pass


class ParseError(PoseNormError):
    """Malformed annotation or binary file.

    ``offset`` is a byte offset into the file when it is known.
    """

    def __init__(self, message, offset=None, line=None, field=None):
        super().__init__(message)
        self.offset = offset
        self.line = line
        self.field = field


class SchemaMismatch(PoseNormError):
    pass


class ConfigError(PoseNormError):
    pass
