"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class EnvelopeTooLooseError(RuntimeError):
    """Uniform-proposal rejection sampling would almost never accept."""


class NumericOverflowError(FloatingPointError):
    pass


class MissingGradientError(RuntimeError):
    pass


class SingularLayerError(ArithmeticError):
    pass


class ConstructionError(RuntimeError):
    pass


class InsufficientDataError(ValueError):
    pass


class ConfigError(ValueError):
    pass
