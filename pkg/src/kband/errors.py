"""Exception types shared across the package."""


class KBandError(Exception):
    """Base class for every error raised by kband."""


class InvalidArgument(KBandError, ValueError):
    pass


class SingularSystemError(KBandError, ArithmeticError):
    pass


class ConvergenceError(KBandError, ArithmeticError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (final relative residual {residual:.3e})")
        self.residual = residual


class InvalidRecord(KBandError, ValueError):
    pass


class CorruptRecord(KBandError, IOError):
    pass


class UnsupportedVersion(KBandError, IOError):
    pass


class DegenerateInstance(KBandError, ArithmeticError):
    """A verification instance has a zero reference gradient; re-seed it."""


class DivergenceError(KBandError, ArithmeticError):
    pass
