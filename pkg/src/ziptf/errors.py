"""Error types shared across the package."""


class ZiptfError(Exception):
    """Base class for all package-specific errors."""


class InvalidModelError(ZiptfError, ValueError):
    """A factor model violates its structural invariants."""


class NumericalDegeneracyError(ZiptfError, RuntimeError):
    """An inference update produced a numerically degenerate quantity."""


class DegenerateRunError(ZiptfError, RuntimeError):
    """A restart produced factors unusable for aggregation (e.g. all zero)."""


class DegenerateClusteringError(ZiptfError, RuntimeError):
    """Clustering cannot proceed (fewer distinct points than clusters)."""


class ConsensusDegeneracyError(ZiptfError, RuntimeError):
    """Consensus aggregation left an empty cluster after filtering."""


class UndefinedMetricError(ZiptfError, ValueError):
    """A metric is undefined for the given inputs (e.g. all-zero tensor)."""


class ParseError(ZiptfError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line
