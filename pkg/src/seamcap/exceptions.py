"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class SeamcapError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SeamcapError, ValueError):
    """Invalid or impossible configuration."""


class DataError(SeamcapError):
    """Input data is malformed or insufficient."""


class NumericError(SeamcapError, ArithmeticError):
    """A numerical computation produced an unusable result."""


class DegenerateRotation(NumericError):
    """A 6D rotation vector cannot be orthonormalised."""


class InsufficientHistory(DataError):
    pass


class ZeroMedian(DataError):
    pass


class GapDetected(DataError):
    pass


class StreamGap(GapDetected):
    """Live stream interval exceeded the tolerated gap."""


class NonFiniteActivation(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class DivergenceDetected(NumericError):
    pass


class EmptyTestSet(DataError):
    pass


class ProtocolError(DataError):
    """Base class for wire-format errors."""


class CrcMismatch(ProtocolError):
    pass


class BadMagic(ProtocolError):
    pass


class RangeViolation(ProtocolError, ValueError):
    pass


class TransportClosed(SeamcapError, ConnectionError):
    pass
