"""Exception types raised across the package."""


class MeshFormatError(ValueError):
    """A mesh or correspondence file could not be parsed."""


class MeshIndexError(IndexError):
    """A face or vertex index is out of range."""


class EmptySurfaceError(RuntimeError):
    """The requested level set does not cross the sampling grid."""


class DegenerateConstraintError(RuntimeError):
    """Every vertex of a constraint system has a vanishing spatial gradient."""


class SolverError(RuntimeError):
    """A linear solve produced a non-finite or unusable result."""


class ShapeMismatchError(ValueError):
    """Array or layer shapes do not agree."""


class GraphError(RuntimeError):
    """Shape-graph construction or traversal failed."""

    def __init__(self, message, unreachable=()):
        super().__init__(message)
        self.unreachable = list(unreachable)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
