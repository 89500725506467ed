"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, address, or command usage."""


class FitError(RuntimeError):
    """Rate fitting failed (too few usable levels)."""


class CalibrationError(RuntimeError):
    """Strike calibration could not bracket or reach the target."""
