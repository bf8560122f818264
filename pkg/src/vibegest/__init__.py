"""Vibration-swipe gesture recognition on tiny integer-only 1D CNNs.

The package covers the full path from raw 4-channel vibration waveforms to a
deployable accelerator description: data ingestion and windowing, float and
quantization-aware training, bit-exact integer inference, a cycle-accurate
streaming simulator with resource/power surrogates, and a constraint-pruned
bi-objective architecture search.
"""

__version__ = "0.1.0"

from . import accel, dataio, nn, quant, reference, search, trainer

__all__ = [
    "accel",
    "dataio",
    "nn",
    "quant",
    "reference",
    "search",
    "trainer",
    "__version__",
]
