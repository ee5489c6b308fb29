"""Exception types raised across the package."""


class MagGnnError(Exception):
    """Base class for all package errors."""


class InvalidTupleError(MagGnnError, ValueError):
    pass


class InvalidParameterError(MagGnnError, ValueError):
    pass


class InvalidPermutationError(MagGnnError, ValueError):
    pass


class InvalidActionError(MagGnnError, ValueError):
    pass


class BudgetError(MagGnnError, RuntimeError):
    """Raised when an exhaustive enumeration would exceed its budget."""


class ShapeError(MagGnnError, ValueError):
    pass


class StateError(MagGnnError, RuntimeError):
    pass


class CheckpointError(MagGnnError, OSError):
    """Checkpoint is missing, malformed, or does not match the model shape."""


class ConfigError(MagGnnError, ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
