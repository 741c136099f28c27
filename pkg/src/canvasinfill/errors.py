"""Exception types shared across the package."""


class CanvasInfillError(Exception):
    """Base class for all package errors."""


class ConfigError(CanvasInfillError):
    """A configuration value or spec range is invalid."""


class ContractError(CanvasInfillError):
    """An operation was called with arguments violating its contract."""


class IngestError(CanvasInfillError):
    """A dataset could not be read."""


class DegenerateRepresentationError(CanvasInfillError):
    """Pre-normalization representation collapsed to (near) zero norm."""
