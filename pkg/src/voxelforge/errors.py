"""Exception hierarchy shared across the pipeline."""


class VoxelForgeError(Exception):
    pass


class ShapeError(VoxelForgeError, ValueError):
    """Grids or tensors whose dimensions do not line up."""


class DataError(VoxelForgeError, ValueError):
    """Non-finite or otherwise malformed numeric input."""


class FormatError(VoxelForgeError, ValueError):
    """A binary or JSON artifact failed to parse or validate."""


class ConstraintError(VoxelForgeError):
    """Interface constraints that no repair can satisfy."""


class InfeasibleDesignError(VoxelForgeError):
    """A surrogate evaluator cannot produce a label for the design."""


class NumericalError(VoxelForgeError, ArithmeticError):
    """NaN/inf appeared during optimisation."""


class ConfigError(FormatError):
    """Pipeline configuration with unknown keys or invalid values."""
