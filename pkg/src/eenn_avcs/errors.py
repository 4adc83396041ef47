"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates an operation's precondition."""


class FormatError(ValueError):
    """A serialized artifact is missing, malformed or inconsistent."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value or a failed factorization."""


class SingularDesignError(NumericalError):
    """The posterior precision matrix could not be factorized."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss!r})")
        self.epoch = epoch
        self.loss = loss
