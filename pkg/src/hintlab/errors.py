class ConfigError(ValueError):
    """Invalid configuration or hyperparameter."""


class InputError(ValueError):
    """Malformed input to a pure function (bad token, shape mismatch, empty set)."""


class InternalError(RuntimeError):
    """Inconsistent internal state, e.g. a trajectory scored under the wrong context."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameters.

    ``dump`` carries whatever diagnostics were available at the failure point.
    """

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}
