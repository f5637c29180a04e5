"""Exception hierarchy shared across the toolkit."""


class SignkitError(Exception):
    """Base class for all toolkit errors."""


class ParseError(SignkitError):
    """A file does not conform to the documented schema.

    Carries a locator string (e.g. ``annotations[3].bbox``) so broken
    records can be found in large files.
    """

    def __init__(self, locator: str, message: str):
        self.locator = locator
        super().__init__(f"{locator}: {message}")


class IntegrityError(SignkitError):
    """Cross-record invariants are violated (dangling references, duplicate ids)."""


class DegenerateGeometryError(SignkitError):
    """A geometric computation has no well-conditioned solution."""


class GeometryUnavailableError(SignkitError):
    """Raised for categories without a geometric template; callers should
    skip geometry normalization and geometric distortion for these."""


class InsufficientSamplesError(SignkitError):
    """Too few samples for the requested model complexity."""


class RejectedSampleError(SignkitError):
    """A sampled distortion fell outside usable bounds; caller should resample."""


class PlacementError(SignkitError):
    """Instances could not be placed on a background under the layout rules."""


class InfeasibleSplitError(SignkitError):
    """The split constraints cannot be satisfied with the given clusters."""

    def __init__(self, message: str, blocking_categories: list[int] | None = None):
        self.blocking_categories = blocking_categories or []
        super().__init__(message)
