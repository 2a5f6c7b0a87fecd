"""Exception types shared across the package."""


class FloodgenError(Exception):
    """Base class for all floodgen errors."""


class InvalidInputError(FloodgenError, ValueError):
    """An argument violates a documented precondition or invariant."""


class InsufficientDataError(FloodgenError, RuntimeError):
    """Not enough data to run an estimator (e.g. < 4 point matches)."""


class MissingAssetError(FloodgenError, FileNotFoundError):
    """A required external asset (e.g. pretrained weights) is absent."""
