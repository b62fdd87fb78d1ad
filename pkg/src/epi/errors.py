"""Exception hierarchy shared by all modules."""


class EPIError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(EPIError):
    """A required column or configuration key is missing."""


class ParseError(EPIError):
    """A data cell could not be parsed."""

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class InsufficientDataError(EPIError):
    """Too few observations for the requested computation."""


class InfeasibleError(EPIError):
    """Zero is not in the interior of the convex hull of the constraint rows."""


class ConvergenceError(EPIError):
    """An iterative solver stopped before meeting its tolerance.

    ``last`` carries the final iterate so callers can inspect it.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class RankError(EPIError):
    """A Jacobian or covariance matrix lacks the rank the formula needs."""


class LearnerError(EPIError):
    """A cross-fitting learner failed on one fold."""

    def __init__(self, message, fold=None):
        super().__init__(message if fold is None else f"fold {fold}: {message}")
        self.fold = fold
