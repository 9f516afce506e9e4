"""Exception hierarchy shared by every module of the package."""


class AEJointError(Exception):
    """Base class for all package errors."""


class InvalidSignal(AEJointError, ValueError):
    """Empty or non-finite waveform."""


class InvalidConfig(AEJointError, ValueError):
    """A transform or model configuration that cannot be honoured."""


class InvalidInput(AEJointError, ValueError):
    """Arguments with the wrong shape, sign or length."""


class DegenerateInput(AEJointError, ValueError):
    """Input for which the requested quantity is undefined (e.g. zero energy)."""


class InfeasibleTarget(AEJointError, ValueError):
    """CTC target that cannot be aligned to the available frames."""


class ConfigError(AEJointError):
    """Experiment configuration is incomplete or refers to missing data."""


class DataError(AEJointError):
    """Corpus or manifest problems detected at load time."""


class TrainingDivergence(AEJointError, RuntimeError):
    """A loss became non-finite during optimisation."""
