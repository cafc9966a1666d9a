"""Exception types shared across the simulator."""


class StagesimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(StagesimError):
    """Invalid configuration value; message names the offending key."""


class TraceFormatError(ConfigError):
    """Malformed trace file; message carries the line number."""


class HardwareModelError(StagesimError):
    """Runtime or latency model produced or received an invalid value."""


class ExtrapolationError(HardwareModelError):
    """Empirical-table lookup outside the measured grid."""


class RoutingError(StagesimError):
    """No candidate client can serve a stage."""


class AdmissionError(StagesimError):
    """Request can never be scheduled on the client it was assigned to."""


class DeadlockError(StagesimError):
    """Event queue drained while requests remain unserviced."""


class SimulationError(StagesimError):
    """Internal invariant violated during the event loop."""
