from typing import Optional


class EdgeFitError(Exception):
    """Base class for all fitting pipeline errors."""


class InvalidArgumentError(EdgeFitError, ValueError):
    """An argument violates an operation's precondition."""


class DimensionMismatchError(InvalidArgumentError):
    """Array sizes do not agree (e.g. len(alpha) != S)."""


class ModelFormatError(EdgeFitError):
    """A model file could not be read."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class MissingFileError(ModelFormatError, FileNotFoundError):
    pass


class MalformedHeaderError(ModelFormatError):
    pass


class DimensionInconsistencyError(ModelFormatError):
    pass


class ModelValidationError(ModelFormatError):
    """Parsed values break a ShapeModel invariant (e.g. negative variance)."""


class TopologyError(EdgeFitError):
    """Triangle topology is not usable for contour extraction."""


class DegenerateConfigurationError(EdgeFitError):
    """Input geometry is rank deficient (collinear landmarks, coincident points)."""


class DegenerateViewError(EdgeFitError):
    """No occluding boundary vertices under the current pose."""


class NoEdgesError(EdgeFitError):
    """The image edge set is empty."""


class SolverError(EdgeFitError):
    def __init__(self, message: str, iterations: int):
        self.iterations = iterations
        super().__init__(f"{message} (after {iterations} iterations)")
