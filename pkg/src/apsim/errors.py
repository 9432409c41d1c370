"""Exception types raised by the toolkit."""


class ApsimError(Exception):
    """Base class for all toolkit errors."""


class InvalidMeasurementError(ApsimError):
    """CGM sample is non-finite or outside the physical range."""


class SequencingError(ApsimError):
    """Controller was stepped with a non-increasing timestamp."""


class InvalidAnnouncementError(ApsimError):
    """Meal announcement carries a negative carbohydrate amount."""


class NoSteadyStateError(ApsimError):
    """Steady-state solve did not converge within its iteration budget."""


class DivergenceError(ApsimError):
    """Integration produced a non-finite state."""

    def __init__(self, message: str, subject_id: int | None = None,
                 step: int | None = None):
        super().__init__(message)
        self.subject_id = subject_id
        self.step = step


class SamplingExhaustedError(ApsimError):
    """Population sampling exceeded its resample budget."""


class BracketFailureError(ApsimError):
    """No finite bolus minimizer was bracketed below the bolus cap."""


class ConfigError(ApsimError):
    """Run configuration is invalid (unknown key, bad value, missing file)."""


class EmptyInputError(ApsimError, ValueError):
    """Metric computation received an empty series."""
