"""Exception hierarchy shared across the package."""


class MedtuningError(Exception):
    """Base class for all library errors."""


class ShapeError(MedtuningError):
    """Tensor shapes do not conform to an operation's contract."""


class ConfigError(MedtuningError):
    """Invalid or inconsistent configuration."""


class GeometryError(MedtuningError):
    """Spatial geometry (grids, resolutions) cannot be reconciled."""


class TapeError(MedtuningError):
    """A tensor is not connected to the computation tape it is used with."""


class ContractError(MedtuningError):
    """An operation precondition was violated (e.g. non-scalar loss)."""


class DataError(MedtuningError):
    """Labels or data values out of the documented range."""


class FormatError(MedtuningError):
    """A serialized file does not match the expected binary format."""


class TrainingError(MedtuningError):
    """Training diverged or failed to meet its contract."""
