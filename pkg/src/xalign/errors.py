"""Exception types shared across the package."""


class XAlignError(Exception):
    """Base class for all package errors."""


class ShapeError(XAlignError, ValueError):
    pass


class RangeError(XAlignError, ValueError):
    pass


class NumericError(XAlignError, ArithmeticError):
    pass


class UnsupportedSizeError(XAlignError, ValueError):
    pass


class VocabError(XAlignError, KeyError):
    pass


class SpanError(XAlignError, ValueError):
    pass


class ParseError(XAlignError, ValueError):
    pass


class EmptyCorpusError(XAlignError, ValueError):
    pass


class ConfigError(XAlignError, ValueError):
    pass


class UndefinedMetricError(XAlignError, ValueError):
    pass


class TrainingError(XAlignError, RuntimeError):
    """Raised when a training run diverges (non-finite loss)."""
