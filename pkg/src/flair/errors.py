"""Exception hierarchy shared by the library and the command line."""


class FlairError(Exception):
    """Base class for all errors raised by :mod:`flair`."""


class ValidationError(FlairError, ValueError):
    """Bad arguments, shapes, or out-of-domain inputs."""


class NumericalError(FlairError, ArithmeticError):
    """A numerical routine failed (non-finite objective, failed factorization)."""
