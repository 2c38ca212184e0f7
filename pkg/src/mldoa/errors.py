"""Exception hierarchy shared by the library and the command line."""


class DoaError(Exception):
    """Base class for every error raised by :mod:`mldoa`."""


class ConfigError(DoaError, ValueError):
    """Invalid run configuration (bad field, bad value, unsupported option)."""


class RegimeError(DoaError, ValueError):
    """Requested (K, N) combination is not supported (the K = N boundary)."""


class NumericalError(DoaError, ArithmeticError):
    """A numerical routine failed to converge or met a degenerate input."""


class ValidationFailure(DoaError):
    """An oracle check measured an error above its tolerance."""
