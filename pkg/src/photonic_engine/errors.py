"""Exception types shared across the simulator and control stack."""


class PhotonicEngineError(Exception):
    """Base class for all errors raised by this package."""


class InvalidFieldError(PhotonicEngineError, ValueError):
    pass


class InvalidArgumentError(PhotonicEngineError, ValueError):
    pass


class OutOfRangeError(PhotonicEngineError, ValueError):
    pass


class GeometryError(PhotonicEngineError, ValueError):
    pass


class ChannelDisabledError(PhotonicEngineError):
    def __init__(self, channel):
        super().__init__(f"channel {channel} is disabled")
        self.channel = channel


class UnknownChannelError(PhotonicEngineError, KeyError):
    pass


class DegenerateMeasurementError(PhotonicEngineError, ValueError):
    pass


class OutOfBandError(PhotonicEngineError, ValueError):
    pass


class RankDeficientError(PhotonicEngineError, ValueError):
    pass


class AlignmentLostError(PhotonicEngineError):
    def __init__(self, channel, message=None):
        super().__init__(message or f"alignment lost on channel {channel}")
        self.channel = channel


class LockLostError(PhotonicEngineError):
    def __init__(self, channel):
        super().__init__(f"lock lost on channel {channel}: both pair readings at the noise floor")
        self.channel = channel


class NotConvergedError(PhotonicEngineError):
    pass


class SteeringLimitError(PhotonicEngineError):
    def __init__(self, channel, message=None):
        super().__init__(message or f"steering limit exceeded on channel {channel}")
        self.channel = channel


class AssignmentInfeasibleError(PhotonicEngineError):
    def __init__(self, channel, message=None):
        super().__init__(message or f"no isolated emitter reachable from channel {channel}")
        self.channel = channel


class ConfigError(PhotonicEngineError):
    """Raised with the full list of schema problems, each tagged with its key path."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
