"""Exception hierarchy.

Every error raised for bad *data* (as opposed to programming mistakes)
derives from :class:`DataError`; the CLI maps those to exit code 2.
"""


class DataError(Exception):
    """Base class for data-dependent failures."""


class DegenerateStains(DataError):
    """The optical-density cloud does not span two stain directions."""


class TooFewPixels(DataError):
    """Too few tissue pixels survive the transparency threshold."""


class SingularStainMatrix(DataError):
    """The stain normal matrix cannot be inverted."""


class EmptyDataset(DataError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class ModelDimensionMismatch(DimensionMismatch):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class InvalidSchedule(ValueError):
    pass


class MissingStage1(DataError):
    """Stage-2 retraining was requested on a model without a trained backbone."""


class UnsupportedK(ValueError):
    pass


class LengthMismatch(DataError, ValueError):
    pass


class LabelOutOfRange(DataError, IndexError):
    pass


class EmptyMatrix(DataError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownLabel(ParseError):
    def __init__(self, label, line=None):
        self.label = label
        super().__init__(f"unknown label {label!r}", line=line)


class MissingFile(DataError, FileNotFoundError):
    pass


class CheckpointError(DataError):
    pass


class IndexOutOfRange(IndexError):
    pass
