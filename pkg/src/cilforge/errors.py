class CILError(Exception):
    """Base class for all cilforge errors."""


class ConfigError(CILError, ValueError):
    """Invalid configuration, shape mismatch or inconsistent arguments."""


class NonFiniteError(CILError, FloatingPointError):
    """A loss or gradient became NaN/inf during training."""


class ClipFormatError(CILError):
    """Base class for clip file decoding failures."""


class MalformedHeaderError(ClipFormatError):
    pass


class TruncatedPayloadError(ClipFormatError):
    pass


class VersionMismatchError(ClipFormatError):
    pass
