"""Exception hierarchy shared by the library and the CLI exit-code contract."""


class XsrcError(Exception):
    """Base class for all library errors."""


class ConfigError(XsrcError):
    """Invalid configuration, incompatible geometry, or misuse of a contract."""


class DataFormatError(XsrcError):
    """A file or stream does not conform to its declared format."""


class CorruptHeaderError(DataFormatError):
    """Magic bytes, header fields, or mask bytes are invalid."""


class DimensionMismatchError(DataFormatError):
    """Declared dimensions are inconsistent with the payload."""


class NoValidCellsError(DataFormatError):
    """The validity mask excludes every cell."""


class ChecksumError(DataFormatError):
    """Stored checksum or integrity probe does not match the payload."""


class UnsupportedVersionError(XsrcError):
    """File or container version is newer than this library supports."""


class NumericalError(XsrcError):
    """Non-finite data, singular systems, or failed numerical criteria."""


class UntrainedError(XsrcError):
    """A readout or forecast was requested before training."""
