"""Exception types shared across the package."""


class TorchUnitError(Exception):
    """Base class for all package errors."""


class ShapeError(TorchUnitError, ValueError):
    pass


class BroadcastError(ShapeError):
    pass


class TapeError(TorchUnitError, RuntimeError):
    pass


class ConfigError(TorchUnitError, ValueError):
    pass


class BoundsError(TorchUnitError, IndexError):
    pass


class FormatError(TorchUnitError, ValueError):
    pass


class NumericalError(TorchUnitError, FloatingPointError):
    pass
