"""Exception hierarchy shared by all dtireg modules."""


class DtiRegError(Exception):
    """Base class for toolkit errors."""


class FormatError(DtiRegError):
    """Malformed DTV header."""


class TruncationError(FormatError):
    """Payload shorter or longer than the header declares."""


class DataError(DtiRegError):
    """Non-finite or otherwise unusable sample values."""


class ValidationError(DtiRegError, ValueError):
    """An object violates its type invariants or an argument is out of range."""


class ConfigurationError(ValidationError):
    """Inconsistent configuration, e.g. a rank-deficient gradient scheme."""


class DomainError(DtiRegError, ValueError):
    """A point lies outside the region covered by a transform."""


class DegenerateError(DtiRegError):
    """Degenerate data: empty overlap, single occupied bin, empty mask."""


class SingularJacobianError(DtiRegError):
    """Local Jacobian determinant at or below the folding threshold."""

    def __init__(self, message, voxels=()):
        super().__init__(message)
        self.voxels = list(voxels)


class OptimizationError(DtiRegError):
    """The optimizer could not make progress from its starting point."""
