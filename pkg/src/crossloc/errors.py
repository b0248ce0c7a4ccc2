"""Exception types raised across the toolkit."""


class CrossLocError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CrossLocError):
    """Invalid configuration values (CLI exit code 2)."""


class DataError(CrossLocError):
    """Input data is missing, malformed or insufficient (CLI exit code 3)."""


class TooFewPoints(DataError):
    pass


class TooFewPointsRemaining(DataError):
    pass


class ImageTooSmall(DataError):
    pass


class NonFiniteActivation(CrossLocError):
    pass


class NonFiniteGradient(CrossLocError):
    pass


class ShapeMismatch(CrossLocError):
    pass


class DatasetTooSmall(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptyDatabase(DataError):
    pass


class EmptyTestSet(DataError):
    pass


class MissingGroundTruth(DataError):
    pass


class DegenerateConfiguration(CrossLocError):
    pass


class BehindCamera(CrossLocError):
    pass
