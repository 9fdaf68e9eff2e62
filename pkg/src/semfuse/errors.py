"""Exception hierarchy shared by every module."""


class FusionError(Exception):
    """Base class for all errors raised by semfuse."""


class MissingFile(FusionError, FileNotFoundError):
    pass


class ChannelMismatch(FusionError, ValueError):
    pass


class CorruptImage(FusionError, ValueError):
    pass


class ColorspaceMismatch(FusionError, ValueError):
    pass


class ParseError(FusionError, ValueError):
    pass


class ShapeMismatch(FusionError, ValueError):
    pass


class DegenerateChannel(FusionError, ValueError):
    pass


class EmptyText(FusionError, ValueError):
    pass


class ZeroVector(FusionError, ValueError):
    pass


class BackendUnavailable(FusionError, RuntimeError):
    pass


class NonFiniteLoss(FusionError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EmptyManifest(FusionError, ValueError):
    pass


class VersionMismatch(FusionError, ValueError):
    pass


class CorruptCheckpoint(FusionError, ValueError):
    pass
