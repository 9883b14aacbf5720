class MaskfillError(Exception):
    """Base class for errors raised by maskfill."""


class ConfigError(MaskfillError, ValueError):
    """Invalid configuration value, unknown key, or unparsable config file."""


class CheckpointError(MaskfillError, ValueError):
    """Checkpoint archive is unreadable, has the wrong format tag, or misses a field."""


class DatasetError(MaskfillError, OSError):
    """Dataset files are missing or inconsistent with the manifest."""


class NonFiniteError(MaskfillError, FloatingPointError):
    """A loss or latent became NaN/Inf.

    Parameters
    ----------
    message : str
        Human readable description
    record : dict, optional
        Diagnostic record (step, task mix, timestep statistics, ...)
    """

    def __init__(self, message: str, record: dict = None):
        super().__init__(message)
        self.record = record if record is not None else {}


class ProbeUnreliableError(MaskfillError, RuntimeError):
    """The prompt-consistency probe is not accurate enough to be used for evaluation."""
