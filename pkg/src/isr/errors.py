"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class MomentError(ValueError):
    """Too few samples to estimate a class-conditional moment."""


class DistinctnessError(ValueError):
    """No pair of environments has distinct class-conditional covariances."""


class SolverError(ValueError):
    """A classifier fit cannot be attempted or diverged."""


class FeatureFileError(ValueError):
    """A feature table could not be parsed.

    ``line`` is the 1-based line number of the offending row when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
