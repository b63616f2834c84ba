"""Exception hierarchy shared by every module."""


class NdeError(Exception):
    """Base class for all library errors."""


class ConfigurationError(NdeError, ValueError):
    """Bad user configuration: unknown names, invalid hyperparameters."""


class ContractError(NdeError, ValueError):
    """A precondition of an operation was violated (shapes, ordering, ranges)."""


class NumericInputError(NdeError, ValueError):
    """NaN or Inf supplied where finite numbers are required."""


class StepBudgetExceeded(NdeError, RuntimeError):
    """The adaptive controller exhausted its step budget."""


class BlowUpError(NdeError, RuntimeError):
    """The solution became non-finite or the step size collapsed."""


class ReconstructionError(NdeError, RuntimeError):
    """Reversible reconstruction drifted away from the known initial state."""


class UnsupportedNoiseError(NdeError, NotImplementedError):
    """The requested stepper cannot handle this noise structure."""


class UnsupportedDepthError(ConfigurationError):
    """Logsignature depth above the supported maximum."""
