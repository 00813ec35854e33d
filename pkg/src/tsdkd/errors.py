"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Malformed data: empty rows, shape mismatches, out-of-vocabulary ids."""


class InvalidParameterError(ValueError):
    """A hyperparameter outside its admissible range."""


class NonFiniteError(FloatingPointError):
    """A function evaluation produced NaN or infinity where a finite value was required."""
