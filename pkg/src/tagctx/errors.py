"""Exception hierarchy shared by all pipeline stages."""


class TagctxError(Exception):
    """Base class for every error raised by this package."""


class EmptyInputError(TagctxError):
    pass


class FormatError(TagctxError):
    pass


class PreconditionError(TagctxError, ValueError):
    pass


class EmptyCorpusError(TagctxError):
    pass


class UntrainableCorpusError(TagctxError):
    pass


class DivergenceError(TagctxError, FloatingPointError):
    """A training loop produced a non-finite loss or parameter."""

    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} during epoch {epoch}")
        self.epoch = epoch


class DimensionError(TagctxError, ValueError):
    pass


class UnknownTagError(TagctxError, KeyError):
    pass


class ColdUserError(TagctxError, KeyError):
    """Prediction was requested for a user the model never saw."""


class StageError(TagctxError):
    """A pipeline stage was run before the stage that produces its inputs."""


class ConfigError(TagctxError):
    """Bad configuration key, value or command-line usage."""
