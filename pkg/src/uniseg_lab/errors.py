class UnisegError(Exception):
    """Base class for the errors uniseg_lab raises."""


class LabelSpaceError(UnisegError):
    """Invalid taxonomy, unknown dataset, or out-of-range class index."""


class EmptyLossError(UnisegError):
    """No (pixel, channel) term survived masking."""


class LabelOutsideSpaceError(UnisegError):
    """A pixel is labeled with a class outside its dataset's label space."""


class DegenerateNormError(UnisegError):
    """A zero-norm feature or weight row was given to cosine_scores."""


class ShapeMismatchError(UnisegError):
    """Array shapes disagree with the model or with each other."""


class NonFiniteGradientError(UnisegError):
    """A gradient block contains nan or inf."""


class ConfigError(UnisegError):
    """A config or spec document is malformed or inconsistent."""


class EvaluationError(UnisegError):
    """Evaluation cannot produce a meaningful number."""
