"""Exception types shared across the package."""


class LrtfimError(Exception):
    pass


class InvalidSizeError(LrtfimError, ValueError):
    pass


class InvalidParameterError(LrtfimError, ValueError):
    pass


class SizeMismatchError(LrtfimError, ValueError):
    pass


class CapabilityError(LrtfimError):
    """Requested problem size exceeds what an exact method can handle."""


class ConvergenceError(LrtfimError, RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NearResonanceError(LrtfimError, ValueError):
    pass


class ZigzagInstabilityError(LrtfimError, ValueError):
    pass


class UnsupportedModelError(LrtfimError, ValueError):
    pass


class FitError(LrtfimError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConfigError(LrtfimError, ValueError):
    pass
