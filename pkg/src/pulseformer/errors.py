"""Exception types shared across the package."""


class PulseformerError(Exception):
    """Base class for all package errors."""


class DimensionError(PulseformerError):
    """Tensor shapes or extents do not satisfy an operation's contract."""


class ConfigurationError(PulseformerError):
    """A model or search configuration is internally inconsistent."""


class InputError(PulseformerError):
    """Input data violates a precondition (too short, misaligned, missing)."""


class EstimationError(PulseformerError):
    """A heart-rate estimate cannot be produced from the given waveform."""


class NumericError(PulseformerError):
    """A numeric failure during training (non-finite loss, diverged step)."""
