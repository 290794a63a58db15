"""Exception hierarchy shared by every hcrnet module.

Exit-code mapping for the CLI lives in ``hcrnet.cli``; library code only
raises, it never calls ``sys.exit``.
"""


class HcrError(Exception):
    """Base class for all hcrnet errors."""


class UsageError(HcrError):
    """API misuse: bad call order, empty selector, backward on detached value."""


class ConfigError(HcrError):
    """Invalid configuration, e.g. a temporal budget the layers cannot satisfy."""


class ShapeError(HcrError):
    """Tensor extents incompatible with the requested operation."""


class InputError(HcrError):
    """Invalid data values: out-of-range class ids, bad priors, bad targets."""


class ParseError(HcrError):
    """Malformed text input (hierarchy CSV, scene config); carries a line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(HcrError):
    """Malformed binary file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TaxonomyError(HcrError):
    """Structurally invalid class hierarchy (orphans, childless coarse classes)."""


class SplitError(HcrError):
    """Patch split left no usable training data."""


class NumericError(HcrError):
    """Non-finite values where finite ones are required."""


class MetricError(HcrError):
    """Metrics requested on degenerate inputs (e.g. an empty confusion matrix)."""
