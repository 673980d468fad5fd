"""Exception types shared across the engine."""


class DropinError(Exception):
    """Base class for engine errors."""


class SceneLoadError(DropinError):
    """Scene config or mesh could not be loaded."""


class DegenerateDistributionError(DropinError):
    """An all-zero map cannot be normalized or sampled."""


class GuidanceUnavailableError(DropinError):
    """The guidance provider failed; the optimization step should be skipped."""


class NumericalFailureError(DropinError):
    """A numerical check (gradcheck, non-finite loss) failed."""
