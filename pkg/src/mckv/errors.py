"""Exception hierarchy shared by all mckv modules."""

from __future__ import annotations


class MckvError(Exception):
    """Base class for every error raised by this package."""


class ConstructionError(MckvError, ValueError):
    """Invalid data passed to a value-type constructor (NaN point, negative weight, ...)."""


class ModelEvaluationError(MckvError):
    """A coefficient evaluator returned a non-finite value.

    Carries the evaluation point so the offending state can be inspected.
    """

    def __init__(self, message: str, t: float, x=None):
        super().__init__(f"{message} (t={t!r}, x={x!r})")
        self.t = t
        self.x = x


class UnsupportedModelError(MckvError):
    """Operation needs a model feature that is absent (e.g. no quasi-periodic representation)."""


class BlowUpError(MckvError):
    """A simulated trajectory left the representable range.

    ``t`` is the last healthy time, ``magnitude`` the largest finite state norm seen there.
    """

    def __init__(self, t: float, magnitude: float):
        super().__init__(f"simulation blew up after t={t!r} (last finite |x| ~ {magnitude!r})")
        self.t = t
        self.magnitude = magnitude


class FlowRangeError(MckvError):
    """Time outside a flow's window with no extension rule to cover it."""


class CoverageError(MckvError):
    """A flow does not cover the requested interval even after extension."""


class DistanceError(MckvError):
    """Incompatible operands for a distance computation (dimension or period mismatch)."""


class SizeLimitError(MckvError):
    """Exact assignment requested beyond the supported size; caller should subsample."""


class DissipativityError(MckvError):
    """The average dissipation precondition fails; carries the measured average."""

    def __init__(self, average: float):
        super().__init__(
            f"average of alpha+beta over one period is {average!r}; "
            "a negative average is required"
        )
        self.average = average


class SpecValidationError(MckvError):
    """A run specification failed validation; ``field`` is the offending field path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
