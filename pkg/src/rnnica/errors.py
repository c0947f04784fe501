"""Exception hierarchy.

Errors fall into three families that the command line maps to exit codes:
configuration/usage problems, malformed data files, and numerical failures.
"""


class RicaError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RicaError):
    pass


class DataFormatError(RicaError):
    pass


class NumericalError(RicaError):
    pass


# -- matcore
class SingularMatrix(NumericalError):
    pass


class NotSymmetric(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class KTooLarge(ConfigError):
    pass


# -- model / grad
class NonPositiveScale(NumericalError):
    pass


class SingularUnmixing(NumericalError):
    """The unmixing matrix (or the data it must unmix) is singular.

    ``last_checkpoint`` is filled in by the training loop when a checkpoint
    had been written before the failure.
    """

    def __init__(self, message="unmixing matrix is singular", last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class NonFiniteGradient(NumericalError):
    def __init__(self, param, message=None):
        super().__init__(message or f"non-finite gradient for parameter {param}")
        self.param = param


class NonFiniteUpdate(NumericalError):
    def __init__(self, param, message=None):
        super().__init__(message or f"non-finite update for parameter {param}")
        self.param = param


# -- train
class DegreeTooHigh(ConfigError):
    pass


class ZeroVariance(NumericalError):
    pass


class WindowTooLong(ConfigError):
    pass


# -- synth
class InvalidStochasticMatrix(ConfigError):
    pass


class NotPositiveDefinite(ConfigError):
    pass


class InvalidHrfParams(ConfigError):
    pass


# -- analysis
class EmptyGraph(ConfigError):
    pass


class RankDeficient(NumericalError):
    pass


class TooFewSamples(ConfigError):
    pass


class LengthMismatch(ConfigError):
    pass


# -- io
class BadMagic(DataFormatError):
    pass


class TruncatedFile(DataFormatError):
    pass


class DimOverflow(DataFormatError):
    pass


class DuplicateName(DataFormatError):
    pass


class ConfigMismatch(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass


class ConfigTypeError(ConfigError, TypeError):
    pass


class MissingRequired(ConfigError):
    pass
