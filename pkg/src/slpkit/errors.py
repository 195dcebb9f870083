"""Exception types shared across the toolkit."""


class SlpkitError(Exception):
    """Base class for all toolkit errors."""


class NotPositiveDefinite(SlpkitError):
    """A matrix required to be positive definite failed its Cholesky factorization."""


class RankDeficient(SlpkitError):
    """A channel matrix does not have full row rank."""


class UnsupportedOrder(SlpkitError):
    """Requested modulation order is not supported."""


class ShapeMismatch(SlpkitError):
    """Operands have incompatible shapes."""


class NonPositiveGamma(SlpkitError):
    """A scaling factor that must be positive is zero or negative."""


class NnlsFailure(SlpkitError):
    """The active-set solver returned a non-optimal iterate."""


class EmptyDataset(SlpkitError):
    """Training requested on a dataset with no samples."""
