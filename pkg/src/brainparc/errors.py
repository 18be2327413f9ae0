"""Exception hierarchy shared across the package."""


class BrainParcError(Exception):
    """Base class for all domain errors raised by brainparc."""


class MalformedHeader(BrainParcError):
    pass


class UnsupportedDatatype(BrainParcError):
    pass


class TruncatedData(BrainParcError):
    pass


class IoFailure(BrainParcError):
    pass


class SingularAffine(BrainParcError):
    pass


class ConstantVolume(BrainParcError):
    pass


class EmptyForeground(BrainParcError):
    pass


class SchemaError(BrainParcError):
    """Raised when a label tree file is invalid.

    ``node_id`` names the offending node (``None`` when the problem is global).
    """

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class ShapeMismatch(BrainParcError, ValueError):
    pass


class ModelShapeMismatch(ShapeMismatch):
    pass


class LengthMismatch(BrainParcError, ValueError):
    pass


class BothEmpty(BrainParcError):
    """Both masks are empty, so the overlap score is undefined."""


class AllZeroDifferences(BrainParcError):
    pass


class ZeroBaseline(BrainParcError):
    pass


class DivergenceDetected(BrainParcError):
    pass
