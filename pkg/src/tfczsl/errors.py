"""Exception hierarchy. The CLI maps each family to its own exit code."""


class TfczslError(Exception):
    pass


class ShapeError(TfczslError, ValueError):
    """Input or parameter dimensions do not line up."""


class CacheError(TfczslError):
    """A forward cache was used with a network it does not belong to."""


class OptimizerError(TfczslError):
    pass


class CheckpointError(TfczslError):
    pass


class DataError(TfczslError):
    pass


class ConfigError(TfczslError):
    pass


class TrainingError(TfczslError):
    pass
