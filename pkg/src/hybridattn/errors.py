"""Exception types for binary file formats and budget requests."""


class FormatError(Exception):
    """Base class for any problem reading one of the binary file formats."""


class MagicError(FormatError):
    """Wrong magic bytes or unsupported format version."""


class TruncatedFileError(FormatError):
    pass


class DimensionError(FormatError):
    """Header dimensions disagree with the payload or with each other."""


class InfeasibleBudgetError(ValueError):
    """A read budget cannot cover the anchors plus the one-time cache fetch."""


class ScoreMismatchError(FormatError):
    """Stored teacher scores do not match ``<q, k> / sqrt(d_h)`` recomputed on load."""
