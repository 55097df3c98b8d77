"""Exception hierarchy shared by every objstyle module."""


class ObjStyleError(Exception):
    """Base class for all errors raised by objstyle."""


class UnreadableFile(ObjStyleError, OSError):
    pass


class TooSmall(ObjStyleError, ValueError):
    pass


class UnmappedColor(ObjStyleError, ValueError):
    pass


class DimensionMismatch(ObjStyleError, ValueError):
    pass


class WriteFailure(ObjStyleError, OSError):
    pass


class UnknownLayer(ObjStyleError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the plain message.
        return str(self.args[0]) if self.args else ""


class WeightsUnavailable(ObjStyleError, FileNotFoundError):
    pass


class InvalidPair(ObjStyleError, ValueError):
    pass


class NonMaximalAmbiguity(ObjStyleError, ValueError):
    pass


class InconsistentMap(ObjStyleError, ValueError):
    pass


class WrongKind(ObjStyleError, ValueError):
    pass


class ShapeMismatch(ObjStyleError, ValueError):
    pass


class DegenerateFeatures(ObjStyleError, ValueError):
    pass


class EmptyMask(ObjStyleError, ValueError):
    pass


class ImageTooSmall(ObjStyleError, ValueError):
    pass


class NonFiniteLoss(ObjStyleError, FloatingPointError):
    pass


class ScorerUnavailable(ObjStyleError, RuntimeError):
    pass
