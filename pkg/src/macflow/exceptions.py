class NumericalAbort(FloatingPointError):
    """Raised when a loss, gradient, or sampler state becomes non-finite.

    ``payload`` carries arrays useful for post-mortem inspection.
    """

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload or {}


class ConfigError(ValueError):
    """Invalid configuration key or value; ``key`` names the offender."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
