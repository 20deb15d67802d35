"""Exception hierarchy shared by all modules."""


class UniDDError(Exception):
    """Base class for library errors."""


class NotSymmetric(UniDDError, ValueError):
    pass


class NotPsd(UniDDError, ValueError):
    pass


class NoConvergence(UniDDError, ArithmeticError):
    pass


class UnstableFilter(UniDDError, ValueError):
    """Step size too large for the spectrum: alpha * lambda exceeds the stable range."""


class SingularSystem(UniDDError, ArithmeticError):
    pass


class ShapeMismatch(UniDDError, ValueError):
    pass


class InvalidConfig(UniDDError, ValueError):
    pass


ConfigError = InvalidConfig


class NonFiniteActivation(UniDDError, ArithmeticError):
    pass


class NonFiniteGradient(UniDDError, ArithmeticError):
    pass


class DegenerateBatch(UniDDError, ValueError):
    pass


class OutOfRange(UniDDError, ValueError):
    pass


class FormatError(UniDDError, ValueError):
    pass


class ChecksumMismatch(FormatError):
    pass


class IdentityViolation(UniDDError, AssertionError):
    """An exact algebraic identity failed beyond its numerical tolerance."""
