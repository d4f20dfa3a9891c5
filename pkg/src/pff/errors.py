"""Exception hierarchy shared by all pff modules."""


class PFFError(Exception):
    """Base class for errors raised by pff."""


class ImageFormatError(PFFError, ValueError):
    """Raster file is not a supported format."""


class TruncatedDataError(PFFError, ValueError):
    """A binary payload ended before its header said it would."""


class FlowFormatError(PFFError, ValueError):
    """A filter-flow file is malformed or violates its invariants."""


class CheckpointError(PFFError, ValueError):
    """A checkpoint container is malformed or disagrees with its config."""


class NumericalError(PFFError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""
