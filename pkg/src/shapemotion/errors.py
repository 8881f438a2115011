"""Exception types shared across the package."""


class ShapeMotionError(Exception):
    """Base class for all package errors."""


class InvalidArgument(ShapeMotionError, ValueError):
    pass


class ModelConfigurationError(ShapeMotionError):
    pass


class InvalidState(ShapeMotionError, RuntimeError):
    pass


class IntegrityError(ShapeMotionError):
    """A file on disk does not match its manifest entry or format."""


class ManifestParseError(ShapeMotionError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = path
        self.line_no = line_no


class TrainingDivergence(ShapeMotionError, FloatingPointError):
    def __init__(self, msg, snapshot=None):
        super().__init__(msg)
        self.snapshot = snapshot or {}


class GenerationFailure(ShapeMotionError):
    pass


class ConfigError(ShapeMotionError, ValueError):
    pass


class MissingCheckpoint(ShapeMotionError, FileNotFoundError):
    pass
