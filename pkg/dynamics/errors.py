class Error(Exception):
    """Base class for pipeline errors. `exit_code` is what the CLI returns."""
    exit_code = 1


class ConfigError(Error):
    """Malformed parameters, configuration files or coefficient tables."""
    exit_code = 2


class EmptyGridError(ConfigError):
    pass


class InfeasibleError(Error):
    """No feasible control solution was found across restarts."""
    exit_code = 3

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or {}


class RetrievalDegeneracyError(Error):
    """The two stored states cannot be told apart through the readout."""
    exit_code = 4


class NumericalInstabilityError(Error):
    exit_code = 5


class StepSizeError(NumericalInstabilityError):
    pass
