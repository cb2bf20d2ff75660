"""Exception hierarchy.

Every error raised for bad input derives from :class:`MetaExpError`, which the
CLI maps to exit code 2.
"""


class MetaExpError(ValueError):
    """Base class for validation and domain errors."""


class SchemaError(MetaExpError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ConfigError(MetaExpError):
    pass


class UnknownListing(MetaExpError):
    pass


class EmptyCorpus(MetaExpError):
    pass


class DimensionMismatch(MetaExpError):
    pass


class EmptyPopulation(MetaExpError):
    pass


class DomainError(MetaExpError):
    pass


class EmptyCluster(MetaExpError):
    pass


class TooFewClusters(MetaExpError):
    pass


class EmptyGroup(MetaExpError):
    pass


class EmptySample(MetaExpError):
    pass


class RankDeficient(MetaExpError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"design matrix is rank deficient at column {column!r}")


class DegenerateDenominator(MetaExpError):
    pass


class MissingIndex(MetaExpError):
    pass


class MissingArtifact(MetaExpError):
    pass
