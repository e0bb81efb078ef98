"""Exception hierarchy for the solver package.

Every error raised on a contract violation derives from :class:`CutDgError`
so callers can catch the package's failures uniformly.
"""


class CutDgError(Exception):
    """Base class for all package errors."""


class InvalidDomainError(CutDgError):
    """Degenerate box or non-positive cell counts."""


class InvalidConfigError(CutDgError):
    """Inconsistent or out-of-range configuration values."""


class InvalidMapError(CutDgError):
    """Aggregation map references edges outside the mesh graph."""


class DegenerateLevelSetError(CutDgError):
    """Level-set indistinguishable from zero over an entire cell."""


class MissingSpeciesError(CutDgError):
    """Requested species has no volume in the referenced cell or face."""


class MissingInterfaceError(CutDgError):
    """Interface quadrature requested on a cell that is not cut."""


class DimensionMismatchError(CutDgError):
    """Vector or matrix dimensions incompatible with the block layout."""


class LayoutMismatchError(CutDgError):
    """Block layouts of two matrices are incompatible for a product."""


class SingularSystemError(CutDgError):
    """Factorization of a singular (sub-)system was attempted."""


class InsufficientAgglomerationError(CutDgError):
    """Mass-matrix factorization failed on a cell the agglomeration
    threshold should have removed."""


class IsolatedSmallCellError(CutDgError):
    """A small cut cell has no same-species neighbor to merge into."""


class DegenerateAggregateError(CutDgError):
    """Aggregate mass matrix is rank deficient."""
