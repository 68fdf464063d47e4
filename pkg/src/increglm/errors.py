"""Exception hierarchy shared across the library.

The CLI maps these onto process exit codes: validation problems exit
with 2, numerical failures with 3, and model-store version mismatches
with 4.
"""


class ValidationError(ValueError):
    """Invalid input: bad labels, malformed files, violated preconditions."""


class ShapeError(ValidationError):
    """Dimension mismatch between vectors, matrices, or datasets."""


class ParseError(ValidationError):
    """Malformed dataset file; message carries the offending line number."""


class CapacityError(ValidationError):
    """Requested representation exceeds a configured size budget."""


class EmptyMemoryError(ValidationError):
    """A curvature memory was required but no valid pairs are available."""


class SingleClassError(ValidationError):
    """Metric undefined because labels contain only one class."""


class NumericalError(ArithmeticError):
    """Non-finite value encountered during optimization."""


class StoreIntegrityError(ValidationError):
    """Model store file is truncated or otherwise unreadable."""


class StoreVersionError(Exception):
    """Model store was written with an incompatible format version."""
