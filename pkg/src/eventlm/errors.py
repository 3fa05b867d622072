"""Exception hierarchy shared by every eventlm module."""


class EventLMError(Exception):
    """Base class for all library errors."""


# codec
class InvalidInterval(EventLMError, ValueError):
    pass


class MalformedTimeTokens(EventLMError, ValueError):
    pass


class OutOfDomainTime(EventLMError, ValueError):
    """A decoded interval is NaN, infinite or negative."""

    def __init__(self, value, message=None):
        self.value = value
        super().__init__(message or f"decoded interval {value!r} is outside [0, inf)")


class MalformedText(EventLMError, ValueError):
    pass


class DecodeError(EventLMError, ValueError):
    pass


# template
class NotTimeOrdered(EventLMError, ValueError):
    pass


class InvalidPrefix(EventLMError, ValueError):
    pass


class NoDescription(EventLMError, ValueError):
    pass


class EmptyPrediction(EventLMError, ValueError):
    pass


# tpp
class UnstableSpec(EventLMError, ValueError):
    pass


# model / intensity
class ContextOverflow(EventLMError, ValueError):
    pass


class EmptyLossMask(EventLMError, ValueError):
    pass


class InvalidParameter(EventLMError, ValueError):
    pass


class OutOfInterval(EventLMError, ValueError):
    pass


class ShapeMismatch(EventLMError, ValueError):
    pass


# pipeline / metrics / cli
class IngestError(EventLMError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class NoData(EventLMError, ValueError):
    pass


class TrainingDiverged(EventLMError, RuntimeError):
    pass


class PredictionFailed(EventLMError, RuntimeError):
    pass


class DegenerateInput(EventLMError, ValueError):
    pass


class IncompatibleCheckpoint(EventLMError, ValueError):
    pass
