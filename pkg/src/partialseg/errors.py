"""Exception types raised across the package."""


class PartialSegError(Exception):
    """Base class for all package errors."""


class InvalidIndex(PartialSegError, IndexError):
    pass


class EmptyKeptSet(PartialSegError, ValueError):
    pass


class UnlabeledIndex(PartialSegError, ValueError):
    pass


class SpaceMismatch(PartialSegError, ValueError):
    pass


class ShapeMismatch(PartialSegError, ValueError):
    pass


class NonFiniteInput(PartialSegError, ValueError):
    pass


class NonFiniteLoss(PartialSegError, ArithmeticError):
    pass


class DivergedLoss(PartialSegError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, state_path=None):
        super().__init__(message)
        self.state_path = state_path


class RejectionLimitExceeded(PartialSegError, RuntimeError):
    pass


class CorruptFile(PartialSegError, ValueError):
    pass


class VersionMismatch(PartialSegError, ValueError):
    pass


class NoForegroundAvailable(PartialSegError, ValueError):
    pass


class MissingCheckpoint(PartialSegError, FileNotFoundError):
    pass


class GradientCheckFailed(PartialSegError, AssertionError):
    pass
