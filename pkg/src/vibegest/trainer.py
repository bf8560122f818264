"""Adam training loop with early stopping and optional quantization-aware mode.

Training is deterministic for a fixed (data, spec, seed): batch order comes
from a seeded generator and every operation is plain numpy. Early stopping
watches validation accuracy (ties broken by lower validation loss) and the
returned graph carries the parameters of the best validation epoch.

With `qat_bits` set, the forward/backward pass runs through the fake-quant
node list from `quant.build_qat_nodes` (weights quantize-dequantized each
step, activation ranges tracked by EMA observers, straight-through
gradients). The resulting observers feed `quant.quantize_model`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, quant
from .errors import ConfigError, TrainingDivergedError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainSpec:
    epochs_max: int = 100
    patience: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    qat_bits: int | None = None
    # optional early gate: (epoch, min val accuracy); failing it stops training
    gate: tuple | None = None

    def __post_init__(self):
        if self.epochs_max < 1 or self.batch_size < 1:
            raise ConfigError("epochs_max and batch_size must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.qat_bits is not None and self.qat_bits < 2:
            raise ConfigError("qat_bits must be >= 2")


@dataclass
class TrainResult:
    graph: nn.ModelGraph
    best_val_accuracy: float
    best_val_loss: float
    best_epoch: int
    stopped_epoch: int
    curves: list = field(default_factory=list)
    gate_failed: bool = False
    observers: list | None = None
    qat_bits: int | None = None


class _Adam:
    def __init__(self, graph, lr):
        self.lr = lr
        self.t = 0
        self.state = {key: (np.zeros_like(arr), np.zeros_like(arr))
                      for key, _, _, arr in graph.param_items()}

    def step(self, graph):
        self.t += 1
        b1c = 1 - ADAM_BETA1 ** self.t
        b2c = 1 - ADAM_BETA2 ** self.t
        for key, layer, name, arr in graph.param_items():
            g = getattr(layer, "g_" + name)
            m, v = self.state[key]
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            arr -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)


def _snapshot(graph, observers):
    params = [arr.copy() for _, _, _, arr in graph.param_items()]
    bn = [(ly.running_mean.copy(), ly.running_var.copy(), ly.seen_batches)
          for ly in graph.layers if ly.kind == "bn"]
    obs = None
    if observers is not None:
        obs = [(o.initialized, o.min, o.max) for o in observers]
    return params, bn, obs


def _restore(graph, observers, snap):
    params, bn, obs = snap
    for (key, layer, name, arr), saved in zip(graph.param_items(), params):
        setattr(layer, name, saved.copy())
    bns = [ly for ly in graph.layers if ly.kind == "bn"]
    for ly, (rm, rv, sb) in zip(bns, bn):
        ly.running_mean, ly.running_var, ly.seen_batches = rm.copy(), rv.copy(), sb
    if observers is not None and obs is not None:
        for o, (ini, mn, mx) in zip(observers, obs):
            o.initialized, o.min, o.max = ini, mn, mx


def train(graph, x_train, y_train, x_val, y_val, spec):
    """Train in place; returns a TrainResult with best-epoch parameters."""
    if len(x_train) == 0 or len(x_val) == 0:
        raise ConfigError("training requires non-empty train and val sets")
    rng = np.random.default_rng(spec.seed)
    observers = None
    if spec.qat_bits is not None:
        nodes, observers = quant.build_qat_nodes(graph, spec.qat_bits)
    else:
        nodes = graph.layers
    opt = _Adam(graph, spec.lr)

    best_acc, best_loss, best_epoch = -1.0, np.inf, 0
    best_snap = _snapshot(graph, observers)
    bad_epochs = 0
    curves = []
    gate_failed = False
    stopped = 0

    n = len(x_train)
    for epoch in range(1, spec.epochs_max + 1):
        perm = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            logits = nn.run_forward(nodes, xb, training=True)
            loss, dlogits = nn.softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            nn.run_backward(nodes, dlogits)
            opt.step(graph)
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())

        val_logits = _batched_forward(nodes, x_val)
        val_loss, _ = nn.softmax_cross_entropy(val_logits, y_val)
        val_acc = float((val_logits.argmax(axis=1) == y_val).mean())
        curves.append({"epoch": epoch, "train_loss": loss_sum / n,
                       "train_acc": correct / n,
                       "val_loss": float(val_loss), "val_acc": val_acc})

        improved = (val_acc > best_acc
                    or (val_acc == best_acc and val_loss < best_loss))
        if improved:
            best_acc, best_loss, best_epoch = val_acc, float(val_loss), epoch
            best_snap = _snapshot(graph, observers)
            bad_epochs = 0
        else:
            bad_epochs += 1

        stopped = epoch
        if spec.gate is not None and epoch == spec.gate[0] and best_acc < spec.gate[1]:
            gate_failed = True
            break
        if bad_epochs >= max(spec.patience, 1):
            break

    _restore(graph, observers, best_snap)
    return TrainResult(graph=graph, best_val_accuracy=best_acc,
                       best_val_loss=best_loss, best_epoch=best_epoch,
                       stopped_epoch=stopped, curves=curves,
                       gate_failed=gate_failed, observers=observers,
                       qat_bits=spec.qat_bits)


def _batched_forward(nodes, x, batch=256):
    outs = [nn.run_forward(nodes, x[i:i + batch], training=False)
            for i in range(0, len(x), batch)]
    return np.concatenate(outs, axis=0)


def evaluate(model, x, y, batch=256):
    """Accuracy and confusion matrix (rows true, cols predicted).

    `model` may be a ModelGraph (float eval), a QAT node list, or a
    QuantizedModel (integer path)."""
    if isinstance(model, quant.QuantizedModel):
        preds = []
        for i in range(0, len(x), batch):
            q = quant.quantize_input(np.asarray(x[i:i + batch], dtype=np.float64),
                                     model)
            preds.append(quant.int_forward(model, q).argmax(axis=1))
        pred = np.concatenate(preds)
        n_classes = model.config.n_classes
    else:
        nodes = model.layers if isinstance(model, nn.ModelGraph) else model
        logits = _batched_forward(nodes, x, batch)
        pred = logits.argmax(axis=1)
        n_classes = logits.shape[1]
    acc = float((pred == y).mean())
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    return acc, conf


def write_training_log(path, result):
    """Line-oriented log: one epoch per line, key=value fields."""
    with open(path, "w") as f:
        for row in result.curves:
            f.write(f"epoch={row['epoch']} train_loss={row['train_loss']:.6f} "
                    f"train_acc={row['train_acc']:.4f} "
                    f"val_loss={row['val_loss']:.6f} "
                    f"val_acc={row['val_acc']:.4f}\n")
        f.write(f"best_epoch={result.best_epoch} "
                f"best_val_acc={result.best_val_accuracy:.4f} "
                f"gate_failed={result.gate_failed}\n")
