"""Exception hierarchy. CLI exit codes hang off these classes."""


class QattsError(Exception):
    exit_code = 1


class ShapeError(QattsError, ValueError):
    pass


class ConfigError(QattsError, ValueError):
    exit_code = 2


class DataError(QattsError, ValueError):
    exit_code = 3


class CheckpointMismatchError(QattsError):
    exit_code = 4


class LoweringError(QattsError):
    """Model cannot be lowered to integer records (e.g. observers never frozen)."""

    exit_code = 5


class IndexOutOfRangeError(QattsError, IndexError):
    exit_code = 6


class QuantizationOverflowError(QattsError, OverflowError):
    pass


class FormatError(QattsError):
    pass


class VersionError(FormatError):
    pass


class CorruptFileError(FormatError):
    pass


class StructureError(FormatError):
    pass
