"""Exception hierarchy shared across the package.

CLI exit codes: ConfigError -> 2, data-side errors -> 3, numeric failures -> 4.
"""


class MgsvError(Exception):
    """Base class for all package errors."""


class ShapeError(MgsvError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyReductionError(MgsvError, ValueError):
    """A reduction was requested over a zero-length axis."""


class NonFiniteError(MgsvError, ArithmeticError):
    """A forward operation produced NaN or Inf."""


class GraphError(MgsvError, RuntimeError):
    """Autodiff graph contract violation (non-scalar root, repeated backward)."""


class DegenerateSimilarityError(MgsvError, ValueError):
    """Cosine similarity requested against a (near-)zero-norm embedding."""


class ConfigError(MgsvError, ValueError):
    """Invalid model/training/synthesis configuration."""


class DataError(MgsvError, ValueError):
    """Invalid dataset contents (manifest records, batching constraints)."""


class FormatError(DataError):
    """Malformed feature or checkpoint file (bad magic, truncation, dims)."""


class ManifestError(DataError):
    """Manifest record violates dataset invariants."""
