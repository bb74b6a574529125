"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions are inconsistent with the requested operation."""


class GeometryError(ValueError):
    """Kernel, padding or stride settings produce an invalid layout."""


class ConfigError(ValueError):
    """Invalid block configuration or incompatible merge inputs."""


class NumericError(ArithmeticError):
    """Numerically invalid parameters (e.g. non-positive variance)."""


class MetricInputError(ValueError):
    """Prediction set cannot support the requested metric."""


class TrainingError(RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(ValueError):
    """Malformed checkpoint file.

    ``record`` names the record being parsed when the failure occurred and
    ``offset`` is the byte offset at which it started.
    """

    def __init__(self, message, record=None, offset=None):
        where = ""
        if record is not None:
            where = f" [record {record!r}"
            if offset is not None:
                where += f" at byte {offset}"
            where += "]"
        super().__init__(message + where)
        self.record = record
        self.offset = offset
