"""Exception hierarchy shared by every geocsp module."""


class GeoCSPError(Exception):
    """Base class for all errors raised by geocsp."""


class ShapeError(GeoCSPError, ValueError):
    """Operands have incompatible shapes."""


class DegenerateInputError(GeoCSPError, ValueError):
    """Input is well-typed but mathematically degenerate (e.g. two zero vectors)."""


class NumericError(GeoCSPError, FloatingPointError):
    """A non-finite value appeared where only finite values are allowed."""


class ConfigError(GeoCSPError, ValueError):
    """A configuration value violates its contract."""


class UsageError(GeoCSPError, ValueError):
    """An operation was called on data it does not accept."""


class FileFormatError(GeoCSPError, ValueError):
    """A persisted file could not be parsed."""


class MalformedHeaderError(FileFormatError):
    pass


class UnsupportedVersionError(FileFormatError):
    pass


class DimensionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass
