"""Exception hierarchy shared by every layer of the package."""


class KwsError(Exception):
    """Base class for all package errors."""


class DecodeError(KwsError):
    pass


class UnsupportedFormat(DecodeError):
    pass


class ManifestError(KwsError):
    pass


class SkipSample(KwsError):
    """Raised when a word does not belong to a task's label set."""


class ConfigError(KwsError):
    pass


class ShapeError(KwsError):
    pass


class NumericError(KwsError):
    pass


class CheckpointError(KwsError):
    pass


class CliError(KwsError):
    pass
