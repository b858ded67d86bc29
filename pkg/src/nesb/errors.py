"""Exception hierarchy shared by all modules."""


class NesbError(Exception):
    """Base class for package errors."""


class InvalidArgument(NesbError, ValueError):
    pass


class DomainError(NesbError, ValueError):
    """Argument outside the effective domain of a convex function."""


class Infeasible(NesbError):
    pass


class DualInfeasible(Infeasible):
    pass


class Unconverged(NesbError):
    pass


class NumericalFailure(NesbError):
    pass


class SupportError(NesbError):
    pass


class TooLarge(NesbError):
    def __init__(self, message, count=None):
        super().__init__(message)
        self.count = count


class StatisticalFailure(NesbError):
    pass


class DiscretizationWarning(UserWarning):
    pass
