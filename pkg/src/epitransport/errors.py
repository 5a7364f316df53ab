"""Exception types shared across modules."""


class DataError(ValueError):
    """Input data is malformed, inconsistent or incompatible."""


class ReferentialIntegrityError(DataError):
    """A file refers to a region that the centroids file does not define."""


class ContinuityError(DataError):
    """Dates are missing or out of order."""
