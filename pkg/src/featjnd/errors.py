"""Exception types shared across the package."""


class FeatJndError(Exception):
    """Base class for all package errors."""


class ValidationError(FeatJndError):
    """An object violates one of its construction invariants."""


class ShapeMismatchError(FeatJndError):
    """Two tensors that must agree in shape do not."""

    def __init__(self, shape_a, shape_b, context=""):
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        msg = f"shape mismatch: {self.shape_a} vs {self.shape_b}"
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


class PersistenceError(FeatJndError):
    """File could not be written or read back."""


class FormatError(FeatJndError):
    """A stored file is malformed; the message names the failing field."""


class DegenerateInputError(FeatJndError):
    """Input is mathematically degenerate for the requested operation."""


class DivergenceError(FeatJndError):
    """Training produced a non-finite loss; the message names the term."""


class BundleQualityError(FeatJndError):
    """A task bundle failed to pretrain to its quality threshold."""


class ConfigError(FeatJndError):
    """A run configuration is missing, malformed, or has unknown keys."""


class MissingArtifactError(FeatJndError):
    """A required checkpoint or result file does not exist."""
