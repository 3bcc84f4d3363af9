"""Exception types raised across the package."""


class DPATError(Exception):
    pass


class ConfigurationError(DPATError, ValueError):
    pass


class DimensionMismatchError(DPATError, ValueError):
    pass


class InvalidPromptError(DPATError, ValueError):
    pass


class DegenerateInputError(DPATError, ValueError):
    pass


class SelectionError(DPATError, LookupError):
    pass


class ProtocolError(DPATError, ValueError):
    """Violation of the class-incremental protocol (overlapping or uneven class groups)."""


class DataError(DPATError, ValueError):
    pass


class GenerationError(DPATError, ValueError):
    pass


class UndefinedMetricError(DPATError, ValueError):
    pass


class CheckpointError(DPATError, IOError):
    pass
