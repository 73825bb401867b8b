"""Exception hierarchy.

``ConfigError`` maps to CLI exit code 2, ``NumericError`` to exit code 3.
"""


class OSTError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(OSTError, ValueError):
    pass


class NumericError(OSTError, ArithmeticError):
    pass


# numeric core
class NonSymmetric(OSTError, ValueError):
    pass


class SingularAfterDamping(NumericError):
    pass


class DidNotConverge(NumericError):
    def __init__(self, message, grad_norm=None, iterations=None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.iterations = iterations


class LengthMismatch(OSTError, ValueError):
    pass


# models
class DimensionMismatch(OSTError, ValueError):
    pass


class EmptyDataset(OSTError, ValueError):
    pass


class TooLargeForDense(OSTError, ValueError):
    pass


# datasets
class InvalidRate(OSTError, ValueError):
    pass


class BadMagic(OSTError, ValueError):
    pass


class TruncatedFile(OSTError, ValueError):
    pass


class CountMismatch(OSTError, ValueError):
    pass


class TooSmallForStratification(OSTError, ValueError):
    pass


class IdOverlap(OSTError, ValueError):
    pass


# oracles
class SingularSystem(NumericError):
    pass


class IntractableLOO(OSTError, ValueError):
    pass


# scoring
class NonFinite(NumericError):
    pass


class DegenerateInputs(OSTError, ValueError):
    pass


class DriftExceeded(OSTError, ValueError):
    pass


class DegenerateVariance(NumericError):
    pass


# selection
class MissingKey(OSTError, KeyError):
    pass


class IdSetMismatch(OSTError, ValueError):
    pass


class ZeroVariance(NumericError):
    pass


class TooFewSamples(OSTError, ValueError):
    pass


# experiments
class NoFlags(OSTError, ValueError):
    pass
