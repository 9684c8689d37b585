"""Exception hierarchy shared by every layer of the engine."""


class AsdError(Exception):
    """Base class for all engine errors."""


class ShapeError(AsdError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class NumericError(AsdError, ArithmeticError):
    """An operation produced NaN or Inf."""


class ContextError(AsdError, ValueError):
    """Invalid context configuration or mask."""


class AlignmentError(AsdError, ValueError):
    """Audio and video streams cannot be aligned."""


class FrontendError(AsdError, ValueError):
    """Raw audio or image input is unusable."""


class ConfigError(AsdError, ValueError):
    """Model configuration is inconsistent."""


class WeightsFormatError(AsdError, ValueError):
    """A weights/tensor container file is malformed or incomplete."""


class SessionError(AsdError, RuntimeError):
    """A streaming session was used out of order."""


class MetricError(AsdError, ValueError):
    """Evaluation inputs cannot be scored."""
