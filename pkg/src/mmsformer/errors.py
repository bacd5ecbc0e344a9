class MMSFormerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MMSFormerError, ValueError):
    pass


class GroupingError(ShapeError):
    pass


class ConfigError(MMSFormerError, ValueError):
    pass


class DataError(MMSFormerError, ValueError):
    pass


class FormatError(MMSFormerError, ValueError):
    pass


class GraphError(MMSFormerError, RuntimeError):
    pass


class UnsupportedError(MMSFormerError, ValueError):
    pass


class NumericError(MMSFormerError, FloatingPointError):
    pass


class MissingFileError(MMSFormerError, FileNotFoundError):
    pass
