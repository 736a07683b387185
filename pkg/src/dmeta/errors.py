"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised when an input violates a shape, range or normalization contract."""


class NumericError(FloatingPointError):
    """Raised when a loss or gradient becomes non-finite."""


class DegenerateMutation(Exception):
    """Noise injection reached the sigma cap without changing any prediction.

    Callers treat this as a discarded inner loop, not a failure.
    """

    def __init__(self, sigma):
        super().__init__(f"no prediction change up to sigma={sigma:g}")
        self.sigma = sigma


class SkipIteration(Exception):
    """A meta-step had no learners to aggregate."""
