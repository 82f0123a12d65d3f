"""Exception hierarchy shared by every hexform module."""


class HexformError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(HexformError, ValueError):
    pass


class NonFiniteValue(HexformError, FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class NonFiniteGradient(HexformError, FloatingPointError):
    pass


class NotScalarLoss(HexformError, ValueError):
    pass


class NonFiniteMaskValue(HexformError, ValueError):
    pass


class SeqTooLong(HexformError, ValueError):
    pass


class VocabOverflow(HexformError, ValueError):
    pass


class DidNotConverge(HexformError, RuntimeError):
    """Raised by estimator training; carries the trained estimator and report."""

    def __init__(self, message, estimator=None, report=None):
        super().__init__(message)
        self.estimator = estimator
        self.report = report


class EmptyCalibration(HexformError, ValueError):
    pass


class NonFiniteLoss(HexformError, FloatingPointError):
    pass


class MissingAffineNorm(HexformError, ValueError):
    pass


class InvalidSpec(HexformError, ValueError):
    pass


class ParseError(HexformError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class LabelOutOfSchema(HexformError, ValueError):
    pass


class CheckpointError(HexformError, ValueError):
    pass


# -- homomorphic backend ------------------------------------------------------


class KeyMismatch(HexformError):
    pass


class LevelMismatch(HexformError):
    pass


class DepthExceeded(HexformError):
    def __init__(self, message, site=""):
        super().__init__(f"{message} at {site}" if site else message)
        self.site = site


class UnsupportedOp(HexformError):
    """A primitive that leveled HE cannot evaluate was applied to ciphertext."""

    def __init__(self, primitive, site=None):
        super().__init__(f"{primitive} at {site}" if site else primitive)
        self.primitive = primitive
        self.site = site


class TooManySlots(HexformError, ValueError):
    pass


class ScaleOverflow(HexformError):
    pass


# -- protocol ------------------------------------------------------------------


class MalformedBlob(HexformError, ValueError):
    pass


class ProtocolVersionMismatch(HexformError):
    pass


class SessionAborted(HexformError):
    def __init__(self, message, code="SessionAborted"):
        super().__init__(message)
        self.code = code


class ChannelClosed(SessionAborted, ConnectionError):
    """The transport went away; a session-level abort seen from either side."""

    def __init__(self, message, code="channel-closed"):
        super().__init__(message, code)


class EmptyQuery(HexformError, ValueError):
    pass
