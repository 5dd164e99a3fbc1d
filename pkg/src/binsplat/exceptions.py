"""Exception types raised across the package."""


class BinsplatError(Exception):
    """Base class for package errors."""


class FormatError(BinsplatError, ValueError):
    """A file does not follow the expected binary or text layout."""


class EmptySceneError(BinsplatError, ValueError):
    """A scene file holds zero Gaussians."""


class NestingError(BinsplatError, ValueError):
    """A mask pyramid violates the parent-child nesting invariant.

    Attributes
    ----------
    view, pixel, level : int
        First offending view index, flat row-major pixel index and
        1-based level.
    """

    def __init__(self, view, pixel, level, reason=""):
        self.view = int(view)
        self.pixel = int(pixel)
        self.level = int(level)
        msg = f"nesting violated at view {self.view}, pixel {self.pixel}, level {self.level}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class SamplingError(BinsplatError, ValueError):
    """A view has no labeled pixels; the caller should skip it."""


class NumericError(BinsplatError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration, breakdown):
        self.iteration = iteration
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown}")


class LayoutMismatchError(BinsplatError, ValueError):
    """A checkpoint is incompatible with the scene or config it is resumed with."""
