"""Exception hierarchy.

CLI exit codes are attached to the classes: 2 config, 3 data, 4 invariant.
"""


class QmoeError(Exception):
    exit_code = 4


class ParameterError(QmoeError, ValueError):
    """An argument is outside its legal domain."""

    exit_code = 2


class ShapeError(QmoeError, ValueError):
    exit_code = 3


class InvariantError(QmoeError):
    """A value violates an invariant that the library promises to keep."""

    exit_code = 4


class InfiniteDivergence(QmoeError, ArithmeticError):
    """KL(p || q) is infinite: p puts mass where q has none."""

    exit_code = 4


class DataError(QmoeError):
    exit_code = 3


class FormatError(DataError):
    """A file does not parse as the expected binary format."""

    code = "format"


class TruncatedError(FormatError):
    code = "truncated"


class ChecksumError(FormatError):
    code = "crc"


class VersionError(FormatError):
    code = "version"


class IntegrityError(DataError):
    """Packed payload is inconsistent with its declared shape."""


class ConfigError(QmoeError, ValueError):
    exit_code = 2
