"""Exception hierarchy shared by all stages.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2.
"""


class UavMoeError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(UavMoeError):
    """Missing or malformed configuration, geometry files, or coefficients."""


class DataError(UavMoeError):
    """Input data that cannot be interpreted."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    """Parsed data that violates a dataset-level invariant (e.g. duplicate ids)."""


class GeometryError(ConfigError):
    """Degenerate polygons or edges."""


class DomainError(ValueError, UavMoeError):
    """A numeric argument outside the domain of a formula."""


class ConsistencyError(DataError):
    """Derived series that contradict their own bookkeeping."""


class InsufficientDataError(DataError):
    pass
