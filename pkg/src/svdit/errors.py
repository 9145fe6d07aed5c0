"""Exception types shared across the library.

Everything raised deliberately by this package derives from SvditError so
callers (and the CLI) can map library failures to a single exit path while
programming mistakes still surface as ordinary exceptions.
"""


class SvditError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SvditError, ValueError):
    """Operands disagree on dimensions, dtypes, or an index is out of range."""


class DegenerateRowError(SvditError, ValueError):
    """A softmax row has no active entries, so its distribution is undefined."""


class DegenerateMaskError(DegenerateRowError):
    """A block mask ended up with an empty query row."""


class ConfigError(SvditError, ValueError):
    """A pattern spec, head grouping, search setting, or model spec is inconsistent."""


class PlantError(ConfigError):
    """A plant directive is invalid or cannot be realized for the given geometry."""


class FormatError(SvditError, ValueError):
    """A serialized artifact (binary tensor, PGM, JSON document) is malformed."""
