"""Exception types shared across the package."""


class VL2VError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VL2VError, ValueError):
    pass


class RankError(VL2VError, ValueError):
    pass


class DegenerateVectorError(VL2VError, ValueError):
    pass


class ConfigError(VL2VError, ValueError):
    """Invalid user-supplied configuration or argument."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class MissingEmbeddingError(VL2VError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing embedding"


class StateError(VL2VError, RuntimeError):
    pass


class GeneratorError(VL2VError, RuntimeError):
    pass


class UnsupportedModeError(VL2VError, RuntimeError):
    pass
