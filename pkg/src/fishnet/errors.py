"""Exception hierarchy shared by every fishnet module."""


class FishNetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FishNetError):
    """Raised when an op receives inputs of incompatible shape."""

    def __init__(self, node, expected, actual, detail=""):
        self.node = node
        self.expected = expected
        self.actual = actual
        msg = f"node {node!r}: expected {expected}, got {actual}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class AttributeValidationError(FishNetError):
    """Raised for invalid op attributes such as stride < 1."""


class ConfigError(FishNetError):
    """Raised for an invalid FishNet configuration.

    ``stage`` carries the offending stage index when one applies.
    """

    def __init__(self, message, stage=None):
        self.stage = stage
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)


class BuildError(FishNetError):
    """Raised when a block request would violate the architecture rules."""


class AnalysisError(FishNetError):
    """Raised when the gradient-flow analyzer is given an unusable graph."""


class FormatError(FishNetError):
    """Raised when a dataset or checkpoint file is malformed."""


class TrainingDivergedError(FishNetError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)
