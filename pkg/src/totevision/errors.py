"""Exception types shared across the package.

The CLI maps the four top-level families onto distinct exit codes.
"""


class ToteVisionError(Exception):
    exit_code = 1


class ConfigError(ToteVisionError, ValueError):
    exit_code = 2


class DataError(ToteVisionError):
    exit_code = 3


class CheckpointError(ToteVisionError):
    exit_code = 4


class DivergenceError(ToteVisionError, FloatingPointError):
    exit_code = 5


class DimensionMismatchError(ToteVisionError, ValueError):
    """Input tensor does not have the shape the model was configured for."""


class UnknownModalityError(ToteVisionError, KeyError):
    pass


class ScaleMismatchError(ToteVisionError, ValueError):
    pass


class DegenerateBoxError(ToteVisionError, ValueError):
    pass


class DegenerateEmbeddingError(ToteVisionError, ValueError):
    """An embedding had zero norm before L2 normalization."""


class UnplaceableSceneError(DataError):
    pass


class EmptyGalleryError(ToteVisionError, LookupError):
    pass
