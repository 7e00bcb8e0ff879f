"""Exception types.  The CLI maps ConfigError to exit code 2 and
NumericalError to exit code 3."""


class LongwaveError(Exception):
    pass


class ConfigError(LongwaveError, ValueError):
    pass


class NumericalError(LongwaveError, RuntimeError):
    pass


class SolvabilityViolated(NumericalError):
    pass


class IterationLimit(NumericalError):
    pass


class IncompatibleDomain(ConfigError):
    def __init__(self, axis: int, message: str):
        super().__init__(f"axis {axis}: {message}")
        self.axis = axis


class CFLViolation(ConfigError):
    pass


class BlowUp(NumericalError):
    pass


class ModelInvariantViolation(NumericalError):
    pass
