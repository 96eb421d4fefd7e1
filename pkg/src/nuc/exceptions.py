"""Exception hierarchy.

Data problems (bad files, inconsistent inputs, impossible queries) derive from
:class:`NucDataError`; numerical failures derive from :class:`NucNumericError`.
The CLI maps the two families to distinct exit codes.
"""


class NucDataError(ValueError):
    """Base class for invalid or inconsistent input data."""


class FormatError(NucDataError):
    """A file does not follow the expected binary or CSV layout."""


class ConsistencyError(NucDataError):
    """Two inputs that must agree (lengths, ids, dims) do not."""


class DataError(NucDataError):
    """Values violate a domain invariant (NaN, probability out of range, ...)."""


class ShapeError(NucDataError):
    """Array dimensionality does not match what the fitted object expects."""


class QueryError(NucDataError):
    """A kNN query cannot be answered (k too large, nothing left after exclusion)."""


class BuildError(NucDataError):
    """An index cannot be built over the given vectors."""


class DegenerateTaskError(NucDataError):
    """A binary task has only one class present."""


class UndefinedMetricError(NucDataError):
    """A ranking metric is undefined because one class is missing."""


class UnsupportedInputError(NucDataError):
    """The requested operation needs an input that is not available."""


class NucNumericError(ArithmeticError):
    """A numerical routine failed (singular matrix, non-finite weights)."""
