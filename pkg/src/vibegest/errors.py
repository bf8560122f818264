"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise the
most specific type that applies rather than bare ValueError/RuntimeError.
"""


class VibegestError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(VibegestError):
    """Invalid configuration: bad model shape, unknown option, bad flag combo."""


class DataError(VibegestError):
    """Problems with dataset content or layout."""


class IngestionError(DataError):
    """Missing channels/sessions or malformed directory layout; names the path."""


class FormatError(DataError):
    """Wrong encoding, bit depth, sample rate, or channel count; names the path."""


class TrainingDivergedError(VibegestError):
    """Loss became non-finite during training; carries the epoch."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class StructureError(VibegestError):
    """Model graph does not have the expected layer structure."""


class QuantizationError(VibegestError):
    """Quantization contract violation (range, multiplier, accumulator)."""


class CalibrationError(VibegestError):
    """Not enough or rank-deficient data to fit a surrogate model."""


class SimulationError(VibegestError):
    """Accelerator simulation failed (deadlock, token mismatch); carries a trace."""

    def __init__(self, message, trace=None):
        self.trace = trace or []
        if self.trace:
            message = message + "\n" + "\n".join(self.trace)
        super().__init__(message)


class InfeasibleError(VibegestError):
    """Design cannot satisfy the stated constraints."""
