"""Exception types shared across the package."""


class PushFuseError(Exception):
    """Base class for all package errors."""


class InvalidGeometry(PushFuseError):
    """Polygon or object specification violates a geometric precondition."""


class DegenerateGeometry(PushFuseError):
    """Polygon area is below the minimum resolvable area."""


class SimulationDiverged(PushFuseError):
    """A state variable became non-finite during integration."""

    def __init__(self, message: str, step_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index


class InvalidReset(PushFuseError):
    """Requested reset state is infeasible (e.g. pusher starts in collision)."""


class OutOfRangeParam(PushFuseError):
    """A conditioning or physical parameter falls outside its configured range."""


class EpisodeFinished(PushFuseError):
    """step() called on an environment whose episode already ended."""


class ShapeError(PushFuseError):
    """Array arguments have inconsistent shapes."""


class NumericalError(PushFuseError):
    """Loss or gradient evaluated to a non-finite value."""


class InvalidBuffer(PushFuseError):
    """Rollout buffer contents are inconsistent or incomplete."""


class EnsembleTooSmall(PushFuseError):
    """Ensemble needs at least two members for an epistemic spread."""


class EmptyPrior(PushFuseError):
    """Prior query set holds no records to aggregate."""


class InvalidVariance(PushFuseError):
    """Variance must be finite and strictly positive."""


class DataError(PushFuseError):
    """Training data and labels are misaligned or malformed."""


class MissingArtifact(PushFuseError):
    """A required checkpoint or input file is absent."""


class InvalidConfig(PushFuseError):
    """Run configuration failed validation."""
