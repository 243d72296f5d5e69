"""Exception types shared across the package."""


class QCodecError(Exception):
    """Base class for all package errors."""


class SpecMismatchError(QCodecError):
    """Operands carry incompatible fixed-point formats."""


class CertificateError(QCodecError):
    """A layer's no-overflow certificate does not hold."""


class InfeasibleChannelError(QCodecError):
    """No weight exponent satisfies the accumulator bound for a channel."""


class ModelFormatError(QCodecError):
    """Model manifest/blob is malformed or fails validation."""


class BitstreamError(QCodecError):
    """Bitstream header is malformed or payload cannot be decoded."""


class DegenerateCurveError(QCodecError):
    """Rate-distortion curve unusable for BD-rate (overlap/monotonicity)."""


class ConfigError(QCodecError):
    """Invalid run configuration."""
