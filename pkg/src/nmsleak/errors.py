"""Exception hierarchy shared by every nmsleak module."""

from typing import Optional


class NmsLeakError(Exception):
    """Base class for all errors raised by nmsleak."""


class InvalidBoxError(NmsLeakError, ValueError):
    pass


class CapacityExceededError(NmsLeakError):
    """More detections than the constant-time NMS was provisioned for."""

    def __init__(self, n_detections: int, capacity: int):
        super().__init__(
            f"Constant-time NMS received {n_detections} detections but capacity is {capacity}"
        )
        self.n_detections = n_detections
        self.capacity = capacity


class InvalidRasterError(NmsLeakError, ValueError):
    pass


class InfeasiblePlantError(NmsLeakError):
    pass


class CalibrationError(NmsLeakError):
    pass


class StatisticsError(NmsLeakError, ValueError):
    pass


class ConfigError(NmsLeakError):
    """Invalid run configuration. `field` names the offending key path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"Invalid configuration field '{field}': {message}")
        self.field = field


class TransportError(NmsLeakError):
    """The request never produced an HTTP response."""


class EndpointTimeout(TransportError):
    pass


class EndpointUnreachable(TransportError):
    pass


class EndpointHTTPError(NmsLeakError):
    """The endpoint answered, but with a non-2xx status."""

    def __init__(self, status_code: int, reason: Optional[str] = None):
        super().__init__(f"Endpoint returned HTTP {status_code}: {reason}")
        self.status_code = status_code
        self.reason = reason


class ServiceBindError(NmsLeakError):
    """The detection service could not bind or start."""
