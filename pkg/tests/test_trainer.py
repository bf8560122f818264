"""Training loop: determinism, early stopping, gating, QAT, evaluation."""

import numpy as np
import pytest

from vibegest import nn, quant, trainer
from vibegest.errors import ConfigError, TrainingDivergedError


def toy_data(n=48, length=40, seed=0):
    """Linearly separable toy: class k concentrates energy on channel k."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 4, size=n)
    x = 0.05 * rng.standard_normal((n, length, 4)).astype(np.float32)
    for i, k in enumerate(y):
        x[i, :, k] += 0.8 * np.sin(np.linspace(0, 6.0, length))
    return x.astype(np.float32), y.astype(np.int64)


def toy_graph(seed=0, length=40):
    cfg = nn.ModelConfig(arch=nn.ARCH_CNN, num_blocks=1, input_len=length)
    return nn.build_model(cfg, seed=seed)


def params_of(graph):
    return [a.copy() for _, _, _, a in graph.param_items()]


def test_training_is_deterministic_per_seed():
    x, y = toy_data()
    spec = trainer.TrainSpec(epochs_max=4, patience=4, batch_size=16,
                             lr=3e-3, seed=5)
    r1 = trainer.train(toy_graph(seed=2), x, y, x[:16], y[:16], spec)
    r2 = trainer.train(toy_graph(seed=2), x, y, x[:16], y[:16], spec)
    assert r1.curves == r2.curves
    for a, b in zip(params_of(r1.graph), params_of(r2.graph)):
        np.testing.assert_array_equal(a, b)
    r3 = trainer.train(toy_graph(seed=2), x, y, x[:16], y[:16],
                       trainer.TrainSpec(epochs_max=4, patience=4,
                                         batch_size=16, lr=3e-3, seed=6))
    assert r3.curves != r1.curves


def test_training_learns_the_toy_problem():
    x, y = toy_data(n=96)
    spec = trainer.TrainSpec(epochs_max=30, patience=30, batch_size=16,
                             lr=1e-2, seed=0)
    result = trainer.train(toy_graph(), x, y, x[:32], y[:32], spec)
    assert result.best_val_accuracy >= 0.9
    assert result.curves[-1]["train_acc"] > result.curves[0]["train_acc"]


def test_best_snapshot_is_restored():
    x, y = toy_data(n=64)
    xv, yv = toy_data(n=32, seed=1)
    spec = trainer.TrainSpec(epochs_max=12, patience=3, batch_size=16,
                             lr=3e-3, seed=3)
    result = trainer.train(toy_graph(seed=1), x, y, xv, yv, spec)
    acc, _ = trainer.evaluate(result.graph, xv, yv)
    assert acc == pytest.approx(result.best_val_accuracy)
    assert result.best_val_accuracy == max(c["val_acc"] for c in result.curves)
    assert result.best_epoch <= result.stopped_epoch


def replay_stop_rule(curves, patience, gate=None):
    """Independent replay of the improvement/patience/gate bookkeeping."""
    best_acc, best_loss, best_epoch, bad = -1.0, float("inf"), 0, 0
    for row in curves:
        improved = (row["val_acc"] > best_acc
                    or (row["val_acc"] == best_acc
                        and row["val_loss"] < best_loss))
        if improved:
            best_acc, best_loss, best_epoch = (row["val_acc"],
                                               row["val_loss"], row["epoch"])
            bad = 0
        else:
            bad += 1
        if gate is not None and row["epoch"] == gate[0] and best_acc < gate[1]:
            return row["epoch"], best_epoch, True
        if bad >= max(patience, 1):
            return row["epoch"], best_epoch, False
    return curves[-1]["epoch"], best_epoch, False


@pytest.mark.parametrize("label_seed", [0, 1])
def test_early_stopping_matches_an_independent_replay(label_seed):
    x, y = toy_data(n=48)
    # shuffled labels make validation accuracy wander, exercising patience
    y = np.random.default_rng(label_seed).permutation(y)
    spec = trainer.TrainSpec(epochs_max=25, patience=3, batch_size=16,
                             lr=3e-3, seed=label_seed)
    result = trainer.train(toy_graph(), x, y, x[:16], y[:16], spec)
    stop, best, gated = replay_stop_rule(result.curves, spec.patience)
    assert result.stopped_epoch == stop
    assert result.best_epoch == best
    assert not gated
    assert result.stopped_epoch < spec.epochs_max  # patience actually fired


def test_accuracy_gate_stops_hopeless_runs():
    x, y = toy_data(n=32)
    spec = trainer.TrainSpec(epochs_max=30, patience=30, batch_size=16,
                             lr=1e-12, seed=0, gate=(2, 0.99))
    result = trainer.train(toy_graph(), x, y, x[:8], y[:8], spec)
    assert result.gate_failed
    assert result.stopped_epoch == 2
    passing = trainer.TrainSpec(epochs_max=3, patience=3, batch_size=16,
                                lr=3e-3, seed=0, gate=(2, 0.0))
    assert not trainer.train(toy_graph(), x, y, x[:8], y[:8], passing).gate_failed


def test_divergence_raises_with_the_failing_epoch():
    x, y = toy_data(n=32)
    x[4, 7, 1] = np.nan
    spec = trainer.TrainSpec(epochs_max=5, patience=5, batch_size=32, lr=1e-3)
    with pytest.raises(TrainingDivergedError) as err:
        trainer.train(toy_graph(), x, y, x[:8], y[:8], spec)
    assert err.value.epoch == 1


def test_empty_sets_are_rejected():
    x, y = toy_data(n=8)
    spec = trainer.TrainSpec()
    with pytest.raises(ConfigError):
        trainer.train(toy_graph(), x[:0], y[:0], x, y, spec)
    with pytest.raises(ConfigError):
        trainer.train(toy_graph(), x, y, x[:0], y[:0], spec)


def test_train_spec_validation():
    with pytest.raises(ConfigError):
        trainer.TrainSpec(epochs_max=0)
    with pytest.raises(ConfigError):
        trainer.TrainSpec(batch_size=0)
    with pytest.raises(ConfigError):
        trainer.TrainSpec(patience=-1)
    with pytest.raises(ConfigError):
        trainer.TrainSpec(lr=0.0)
    with pytest.raises(ConfigError):
        trainer.TrainSpec(qat_bits=1)


def test_qat_training_initializes_every_observer():
    x, y = toy_data(n=48)
    graph = toy_graph(seed=4)
    spec = trainer.TrainSpec(epochs_max=12, patience=12, batch_size=16,
                             lr=1e-2, seed=4, qat_bits=8)
    result = trainer.train(graph, x, y, x[:16], y[:16], spec)
    assert result.qat_bits == 8
    assert result.observers
    for obs in result.observers:
        assert obs.initialized
    # observers drive integer conversion without a calibration pass
    qm = quant.quantize_model(graph, 8, x[:16], observers=result.observers)
    acc_int, conf = trainer.evaluate(qm, x, y)
    assert conf.shape == (4, 4)
    assert conf.sum() == len(y)
    assert acc_int >= 0.8


def test_evaluate_handles_all_three_model_forms(trained_tiny, quantized_tiny,
                                                tiny_arrays):
    x, y = tiny_arrays["val"]
    acc_f, conf_f = trainer.evaluate(trained_tiny.graph, x, y)
    acc_q, conf_q = trainer.evaluate(quantized_tiny, x, y)
    nodes, _ = quant.build_qat_nodes(trained_tiny.graph, 8)
    acc_n, conf_n = trainer.evaluate(nodes, x, y)
    for acc, conf in ((acc_f, conf_f), (acc_q, conf_q), (acc_n, conf_n)):
        assert 0.0 <= acc <= 1.0
        assert conf.sum() == len(y)
        assert np.trace(conf) == round(acc * len(y))
    assert abs(acc_q - acc_f) <= 0.2  # integer path tracks the float model


def test_training_log_is_line_oriented(tmp_path):
    x, y = toy_data(n=32)
    spec = trainer.TrainSpec(epochs_max=3, patience=3, batch_size=16, lr=1e-3)
    result = trainer.train(toy_graph(), x, y, x[:8], y[:8], spec)
    path = tmp_path / "train.log"
    trainer.write_training_log(path, result)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == len(result.curves) + 1  # epochs plus summary
    first = dict(kv.split("=") for kv in lines[0].split())
    assert first["epoch"] == "1"
    assert set(first) >= {"epoch", "train_loss", "train_acc", "val_loss",
                          "val_acc"}
    assert lines[-1].startswith("best_epoch=")
