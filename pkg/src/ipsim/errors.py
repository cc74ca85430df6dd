class SimError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SimError, ValueError):
    """Invalid model, initial condition or experiment configuration."""


class SpaceMismatchError(SimError, ValueError):
    """Two measures or vectors do not live on the same type space."""


class BoundViolation(SimError):
    """A rate exceeded the bound declared for thinning."""


class ZeroRateError(SimError):
    """No event can ever fire: total candidate rate is zero."""


class StepSizeError(SimError):
    """A fixed-step integrator left its admissible region; use a smaller step."""


class NotPSDError(SimError, ValueError):
    """Matrix has an eigenvalue below the PSD tolerance."""


class MassLeakageError(SimError):
    """Density solver lost too much mass through the grid boundary."""


class UnsupportedError(SimError):
    """Operation not available for this type space or model."""
