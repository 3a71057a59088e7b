"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class AuthpipeError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(AuthpipeError):
    """Input data or arguments violate a documented contract.

    The CLI maps this to exit code 1.
    """


class ManifestError(ValidationError):
    pass


class PatchError(AuthpipeError):
    pass


class SplitError(ValidationError):
    pass


class TrainingError(AuthpipeError):
    """Training could not proceed or produced a non-finite loss."""


class WeightsUnavailableError(AuthpipeError):
    pass


class CacheMissingError(AuthpipeError):
    pass
