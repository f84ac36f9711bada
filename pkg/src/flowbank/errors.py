"""Exception types raised across flowbank."""


class FlowbankError(Exception):
    """Base class for all package errors."""


class NoData(FlowbankError, ValueError):
    pass


class DimensionMismatch(FlowbankError, ValueError):
    pass


class IoError(FlowbankError, OSError):
    pass


class ParseError(FlowbankError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonFiniteInput(FlowbankError, ValueError):
    pass


class TimeDomainError(FlowbankError, ValueError):
    pass


class RangeError(FlowbankError, ValueError):
    pass


class UnsupportedFamily(FlowbankError, TypeError):
    pass


class ConfigError(FlowbankError, ValueError):
    pass


class InsufficientScaling(FlowbankError, ValueError):
    pass


class DivergedTrajectory(FlowbankError, RuntimeError):
    pass


class NumericalBlowup(FlowbankError, ArithmeticError):
    """A state became non-finite during ODE/SDE integration.

    Attributes
    ----------
    step : int
        Index of the solver step (within the unit interval) where it happened.
    g_abs : float
        ``|g(t)|`` at that step; large values point at a stiff schedule.
    forecast_step : int or None
        Forecast step of the rollout, filled in by ``rollout``.
    """

    def __init__(self, step, g_abs, forecast_step=None, sample=None):
        self.step = step
        self.g_abs = g_abs
        self.forecast_step = forecast_step
        self.sample = sample
        msg = f"non-finite state at solver step {step} (|g(t)|={g_abs:.3g})"
        if forecast_step is not None:
            msg += f", forecast step {forecast_step}"
        if sample is not None:
            msg += f", sample {sample}"
        msg += "; consider a larger sigma_min or more steps"
        super().__init__(msg)
