"""Exception types shared across the package."""


class LidkitError(Exception):
    """Base class for all lidkit errors."""


class DimensionError(LidkitError, ValueError):
    """A dimension argument is empty or otherwise unusable."""


class ShapeError(LidkitError, ValueError):
    """An array does not have the required shape or symmetry."""


class InsufficientPointsError(LidkitError, ValueError):
    """A neighborhood query asked for more neighbors than exist."""


class DegenerateNeighborhoodError(LidkitError, ValueError):
    """All usable neighbor distances collapsed to zero."""


class UnsupportedFamilyError(LidkitError, ValueError):
    """The requested operation is not defined for this manifold family."""


class ConfigError(LidkitError, ValueError):
    """Invalid generator, estimator, or benchmark configuration."""


class CapabilityError(LidkitError, RuntimeError):
    """A score field lacks a capability the estimator requires."""


class ParameterizationError(LidkitError, ValueError):
    """Model output parameterization does not match the requested conversion."""


class EvaluationError(LidkitError, ValueError):
    """A model was evaluated on non-finite input."""


class TrainingDivergedError(LidkitError, RuntimeError):
    """Training loss exceeded the divergence threshold."""


class FormatError(LidkitError, ValueError):
    """A serialized file is malformed or has the wrong magic."""
