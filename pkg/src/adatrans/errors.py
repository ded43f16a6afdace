"""Exception types raised across the package."""


class AdaTransError(Exception):
    """Base class for package errors."""


class SchemaMismatch(AdaTransError):
    pass


class EmptyPopulation(AdaTransError):
    pass


class SplitTooLarge(AdaTransError):
    pass


class ShapeMismatch(AdaTransError, ValueError):
    pass


class DimMismatch(AdaTransError, ValueError):
    pass


class BadCategory(AdaTransError, ValueError):
    pass


class NonFiniteLoss(AdaTransError, FloatingPointError):
    pass


class NonFiniteGradient(AdaTransError, FloatingPointError):
    pass


class NoConvergence(AdaTransError):
    pass


class DegenerateTreatment(AdaTransError, ValueError):
    pass


class ModelSchemaMismatch(AdaTransError, ValueError):
    pass


class EmptyGroup(AdaTransError, ValueError):
    pass


class LengthMismatch(AdaTransError, ValueError):
    pass
