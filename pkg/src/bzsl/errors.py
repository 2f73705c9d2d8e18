"""Exception hierarchy shared by all bzsl modules."""


class BzslError(Exception):
    """Base class for every error raised by this package."""


class IoError(BzslError):
    pass


class FormatError(BzslError):
    pass


class NonFiniteValue(BzslError):
    pass


class DimensionMismatch(BzslError, ValueError):
    pass


class DimensionError(BzslError, ValueError):
    pass


class DomainError(BzslError, ValueError):
    pass


class NotPositiveDefinite(BzslError):
    """Raised when a Cholesky factorization fails even after jitter.

    ``class_id`` is filled in by model code so callers can report which
    class produced the bad scale matrix.
    """

    def __init__(self, message, class_id=None):
        super().__init__(message)
        self.class_id = class_id


class EmptyClass(BzslError):
    pass


class EmptyInput(BzslError):
    pass


class DegenerateSplit(BzslError):
    pass


class UnmatchedSample(BzslError):
    def __init__(self, sample_ids):
        self.sample_ids = list(sample_ids)
        super().__init__(", ".join(self.sample_ids))


class InsufficientClasses(BzslError):
    pass


class KTooLarge(BzslError):
    pass


class UniquenessExhausted(BzslError):
    pass


class NonPositiveDof(BzslError):
    pass


class LengthMismatch(BzslError, ValueError):
    pass


class EmptyGrid(BzslError):
    pass


class InvalidSpec(BzslError, ValueError):
    pass
