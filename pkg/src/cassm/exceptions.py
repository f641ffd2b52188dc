"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Inconsistent or invalid configuration / dimensions."""


class IntegrationError(RuntimeError):
    """A time integration produced non-finite values."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class DivergenceError(RuntimeError):
    """A reduced-model rollout left the finite / bounded region."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class RankError(ValueError):
    """A matrix needed for identification is rank deficient."""


class CalibrationError(ValueError):
    """Control calibration data missing or unusable."""


class ActuatorBandwidthError(ValueError):
    """Actuator feedback margin check failed."""

    def __init__(self, message, margin=None, beta=None):
        super().__init__(message)
        self.margin = margin
        self.beta = beta


class NumericalError(FloatingPointError):
    """Numerical failure inside a filter / solver."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
