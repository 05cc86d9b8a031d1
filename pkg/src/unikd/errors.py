class ConfigError(ValueError):
    """Invalid configuration or input data. The CLI maps this to exit code 2."""


class DivergenceError(FloatingPointError):
    """A training loss became NaN or infinite. The CLI maps this to exit code 3."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
