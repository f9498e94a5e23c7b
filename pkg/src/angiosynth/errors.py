class ConfigError(ValueError):
    """Invalid configuration or option value."""


class RegistrationError(ValueError):
    """Paired images are not spatially aligned."""


class DivergenceError(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, term, step=None):
        self.term = term
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"loss term {term!r} is not finite{where}")
