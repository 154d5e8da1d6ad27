"""Exception types shared across the package."""


class ShiftwarpError(Exception):
    """Base class for all package errors."""


class DimensionError(ShiftwarpError):
    """Shapes or channel counts do not line up and cannot broadcast."""


class ContractError(ShiftwarpError):
    """A caller violated an operation's precondition."""


class SpecError(ShiftwarpError):
    """A retarget spec or target size is invalid."""


class DegeneracyError(ShiftwarpError):
    """An attention map row has (near-)zero total mass."""


class InvariantError(ShiftwarpError):
    """An internal invariant (e.g. shift-map bounds) was violated."""


class FormatError(ShiftwarpError):
    """A serialized payload has the wrong magic, version, or layout."""


class IntegrityError(ShiftwarpError):
    """A serialized payload is truncated or missing required entries."""


class ConfigurationError(ShiftwarpError):
    """A run was requested with missing or inconsistent configuration."""
