"""Exception hierarchy shared by every lazyformer module."""


class LazyFormerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LazyFormerError, ValueError):
    pass


class ContractError(LazyFormerError, ValueError):
    """An operation was called outside its documented preconditions."""


class NonFiniteError(LazyFormerError, FloatingPointError):
    pass


class ConfigError(LazyFormerError, ValueError):
    pass


class LayoutError(ConfigError):
    """Malformed layout string. ``position`` is the offending character index."""

    def __init__(self, message, spec=None, position=None):
        self.spec = spec
        self.position = position
        if spec is not None and position is not None:
            message = f"{message} at position {position} in {spec!r}"
        super().__init__(message)


class LengthError(LazyFormerError, ValueError):
    pass


class CacheError(LazyFormerError, ValueError):
    pass


class VocabularyError(LazyFormerError, ValueError):
    pass


class CheckpointError(LazyFormerError, ValueError):
    pass


class PlanError(LazyFormerError, ValueError):
    pass


class TrainingDivergedError(LazyFormerError, FloatingPointError):
    pass
