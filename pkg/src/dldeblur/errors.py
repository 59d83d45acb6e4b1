"""Exception hierarchy shared by the library and the command line."""


class DeblurError(Exception):
    """Base class for all errors raised by dldeblur."""


class InvalidInputError(DeblurError, ValueError):
    """Arguments violate a precondition (shape, sign, finiteness...)."""


class ConvergenceError(DeblurError):
    """The sparse coding solver did not reach its tolerance.

    The offending optimality violation is kept in ``residual``.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class DegenerateActiveSetError(DeblurError):
    """Gram matrix of the active atoms is numerically singular."""


class EmptyBatchError(DeblurError):
    """Every sample of a mini-batch had to be skipped."""


class NumericError(DeblurError, ArithmeticError):
    """Non-finite values appeared during a computation."""


class CorruptModelError(DeblurError):
    """A model file failed its integrity check."""
