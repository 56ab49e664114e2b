"""Exception hierarchy shared by all modules."""


class BiplanarError(Exception):
    pass


class ParameterError(BiplanarError, ValueError):
    """Invalid argument values or shapes."""


class BoundsError(BiplanarError, IndexError):
    pass


class FormatError(BiplanarError):
    """Malformed file header or payload."""


class DataError(BiplanarError):
    pass


class GeometryError(BiplanarError):
    pass


class ProjectionError(GeometryError):
    """A point lies at or behind the X-ray source."""


class NumericError(BiplanarError, FloatingPointError):
    pass


class TrainingError(BiplanarError):
    pass


class VersionError(BiplanarError):
    """Checkpoint / config / manifest are not compatible."""
