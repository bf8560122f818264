"""Shared fixtures and small-model factories.

The expensive pieces (synthetic corpus, one trained network, one quantized
network) are session-scoped so every test file reuses them.
"""

import numpy as np
import pytest

from vibegest import dataio, nn, quant, trainer

# Small-but-learnable corpus used across the suite: one subject, three
# sessions, two recordings per class, half-second records, downsample 20.
TINY_D = 20
TINY_WINDOW = (0.05, 0.4)


def tiny_corpus(seed=0, separability=1.0, n_recordings=2, n_sessions=3):
    return dataio.synth_dataset(seed, n_subjects=1, n_sessions=n_sessions,
                                class_separability=separability,
                                n_recordings=n_recordings, duration_s=0.5)


def arrays_for(records, method="ps", target="A", seed=0):
    plan = dataio.make_split(records, method, target, seed=seed)
    data = dataio.split_samples(records, plan, d=TINY_D, window=TINY_WINDOW)
    return {name: dataio.stack(getattr(data, name))
            for name in ("train", "val", "test")}


def random_quantized(arch=nn.ARCH_CNN, num_blocks=1, bits=8, input_len=64,
                     seed=0):
    """Quantized model with random weights, calibrated on random data."""
    cfg = nn.ModelConfig(arch=arch, num_blocks=num_blocks, input_len=input_len)
    graph = nn.build_model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    calib = rng.uniform(-1.0, 1.0, size=(8, input_len, cfg.input_ch))
    quant.calibrate_bn(graph, calib)
    return quant.quantize_model(graph, bits, calib)


def random_quantized_input(qm, n=1, seed=0):
    rng = np.random.default_rng(seed)
    cfg = qm.config
    x = rng.uniform(-1.0, 1.0, size=(n, cfg.input_len, cfg.input_ch))
    return quant.quantize_input(x, qm)


@pytest.fixture(scope="session")
def tiny_records():
    return tiny_corpus()


@pytest.fixture(scope="session")
def tiny_arrays(tiny_records):
    return arrays_for(tiny_records)


@pytest.fixture(scope="session")
def tiny_config(tiny_arrays):
    x, _ = tiny_arrays["train"]
    return nn.ModelConfig(arch=nn.ARCH_CNN, num_blocks=2, input_len=x.shape[1])


@pytest.fixture(scope="session")
def trained_tiny(tiny_arrays, tiny_config):
    """FP32 CNN-2 trained on the tiny corpus (shared readonly)."""
    graph = nn.build_model(tiny_config, seed=1)
    spec = trainer.TrainSpec(epochs_max=40, patience=12, batch_size=16,
                             lr=3e-3, seed=1)
    x, y = tiny_arrays["train"]
    xv, yv = tiny_arrays["val"]
    return trainer.train(graph, x, y, xv, yv, spec)


@pytest.fixture(scope="session")
def quantized_tiny(trained_tiny, tiny_arrays):
    x, _ = tiny_arrays["train"]
    return quant.quantize_model(trained_tiny.graph, 8, x[:32])
