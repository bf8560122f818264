"""Tiny 1D conv networks with explicit numpy forward/backward passes.

Two architectures over raw multichannel waveforms:

    cnn     block i: Conv1D(K=3, valid) -> BatchNorm -> ReLU  [-> MaxPool k2s2]
    sepcnn  block i: DepthwiseConv1D(K=3) -> PointwiseConv1D -> BatchNorm
            -> ReLU [-> MaxPool k2s2]

MaxPool follows every block except the last; then GlobalAvgPool,
Dense(hidden) + ReLU, Dense(n_classes). Channel schedule doubles every
second block starting from `base_channels` (4, 4, 8, 8, 16 for base 4).
Every conv and dense layer carries a bias.

Gradients are implemented per layer and checked against finite differences
in the test suite; parameters are float64 throughout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, StructureError

ARCH_CNN = "cnn"
ARCH_SEPCNN = "sepcnn"


# ======================================================================
# Configuration
# ======================================================================


@dataclass(frozen=True)
class ModelConfig:
    arch: str = ARCH_CNN
    num_blocks: int = 3
    base_channels: int = 4
    kernel: int = 3
    input_len: int = 4410
    input_ch: int = 4
    n_classes: int = 4
    dense_hidden: int = 4

    def __post_init__(self):
        if self.arch not in (ARCH_CNN, ARCH_SEPCNN):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if not 1 <= self.num_blocks <= 8:
            raise ConfigError(f"num_blocks {self.num_blocks} out of range")
        for name in ("base_channels", "kernel", "input_len", "input_ch",
                     "n_classes", "dense_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def channels(self, block_index: int) -> int:
        """Output channels of 1-indexed block i: base * 2^floor((i-1)/2)."""
        return self.base_channels * (2 ** ((block_index - 1) // 2))

    def block_lengths(self):
        """Temporal length entering each block, validating the shape algebra."""
        lengths = []
        cur = self.input_len
        for i in range(1, self.num_blocks + 1):
            lengths.append(cur)
            cur = cur - (self.kernel - 1)  # valid conv
            if cur < 1:
                raise ConfigError(
                    f"input_len {self.input_len} collapses at block {i} "
                    f"(conv output would be {cur})")
            if i != self.num_blocks:
                cur = cur // 2  # maxpool k2 s2, floor semantics
                if cur < 1:
                    raise ConfigError(
                        f"input_len {self.input_len} collapses at block {i} pool")
        return lengths, cur  # cur = length entering global average pool


# ======================================================================
# Layers
# ======================================================================


class Layer:
    kind = "?"
    trainable = ()

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def param_items(self):
        return [(n, getattr(self, n)) for n in self.trainable]

    def grad_items(self):
        return [(n, getattr(self, "g_" + n)) for n in self.trainable]

    def state_items(self):
        return []


class Conv1D(Layer):
    kind = "conv"
    trainable = ("w", "b")

    def __init__(self, w, b):
        self.w = w  # (K, Cin, Cout)
        self.b = b  # (Cout,)

    def forward(self, x, training=False):
        self._win = sliding_window_view(x, self.w.shape[0], axis=1)  # (B,L',Cin,K)
        return np.einsum("blck,kco->blo", self._win, self.w,
                         optimize=True) + self.b

    def backward(self, dy):
        k = self.w.shape[0]
        self.g_w = np.einsum("blck,blo->kco", self._win, dy, optimize=True)
        self.g_b = dy.sum(axis=(0, 1))
        B, Lo, _ = dy.shape
        dx = np.zeros((B, Lo + k - 1, self.w.shape[1]), dtype=dy.dtype)
        for i in range(k):
            dx[:, i:i + Lo, :] += dy @ self.w[i].T
        return dx


class DepthwiseConv1D(Layer):
    kind = "depthwise"
    trainable = ("w", "b")

    def __init__(self, w, b):
        self.w = w  # (K, C)
        self.b = b  # (C,)

    def forward(self, x, training=False):
        self._win = sliding_window_view(x, self.w.shape[0], axis=1)  # (B,L',C,K)
        return np.einsum("blck,kc->blc", self._win, self.w,
                         optimize=True) + self.b

    def backward(self, dy):
        k = self.w.shape[0]
        self.g_w = np.einsum("blck,blc->kc", self._win, dy, optimize=True)
        self.g_b = dy.sum(axis=(0, 1))
        B, Lo, C = dy.shape
        dx = np.zeros((B, Lo + k - 1, C), dtype=dy.dtype)
        for i in range(k):
            dx[:, i:i + Lo, :] += dy * self.w[i]
        return dx


class PointwiseConv1D(Layer):
    kind = "pointwise"
    trainable = ("w", "b")

    def __init__(self, w, b):
        self.w = w  # (Cin, Cout)
        self.b = b

    def forward(self, x, training=False):
        self._x = x
        return x @ self.w + self.b

    def backward(self, dy):
        self.g_w = np.einsum("blc,blo->co", self._x, dy, optimize=True)
        self.g_b = dy.sum(axis=(0, 1))
        return dy @ self.w.T


class Dense(Layer):
    kind = "dense"
    trainable = ("w", "b")

    def __init__(self, w, b):
        self.w = w  # (Fin, Fout)
        self.b = b

    def forward(self, x, training=False):
        self._x = x
        return x @ self.w + self.b

    def backward(self, dy):
        self.g_w = self._x.T @ dy
        self.g_b = dy.sum(axis=0)
        return dy @ self.w.T


class BatchNorm1D(Layer):
    """Per-channel batch norm over (batch, time); running stats for eval."""

    kind = "bn"
    trainable = ("gamma", "beta")
    eps = 1e-5
    momentum = 0.9

    def __init__(self, channels):
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.seen_batches = 0  # fold_bn refuses to fold never-updated stats

    def forward(self, x, training=False):
        if training:
            self.seen_batches += 1
            mu = x.mean(axis=(0, 1))
            var = x.var(axis=(0, 1))
            self.running_mean = (self.momentum * self.running_mean
                                 + (1 - self.momentum) * mu)
            self.running_var = (self.momentum * self.running_var
                                + (1 - self.momentum) * var)
        else:
            mu, var = self.running_mean, self.running_var
        self._training = training
        self._inv_std = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mu) * self._inv_std
        return self.gamma * self._xhat + self.beta

    def backward(self, dy):
        self.g_gamma = (dy * self._xhat).sum(axis=(0, 1))
        self.g_beta = dy.sum(axis=(0, 1))
        dxhat = dy * self.gamma
        if not self._training:
            return dxhat * self._inv_std
        n = dy.shape[0] * dy.shape[1]
        s1 = dxhat.sum(axis=(0, 1))
        s2 = (dxhat * self._xhat).sum(axis=(0, 1))
        return self._inv_std / n * (n * dxhat - s1 - self._xhat * s2)

    def state_items(self):
        return [("running_mean", self.running_mean),
                ("running_var", self.running_var),
                ("seen_batches", self.seen_batches)]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class MaxPool1D(Layer):
    """k=2, s=2, floor semantics: a trailing odd sample is dropped."""

    kind = "maxpool"
    k = 2

    def forward(self, x, training=False):
        B, L, C = x.shape
        Lo = L // self.k
        self._in_len = L
        xr = x[:, :Lo * self.k, :].reshape(B, Lo, self.k, C)
        self._idx = xr.argmax(axis=2)
        return np.take_along_axis(xr, self._idx[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(self, dy):
        B, Lo, C = dy.shape
        dxr = np.zeros((B, Lo, self.k, C), dtype=dy.dtype)
        np.put_along_axis(dxr, self._idx[:, :, None, :], dy[:, :, None, :], axis=2)
        dx = np.zeros((B, self._in_len, C), dtype=dy.dtype)
        dx[:, :Lo * self.k, :] = dxr.reshape(B, Lo * self.k, C)
        return dx


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, training=False):
        self._len = x.shape[1]
        return x.mean(axis=1)

    def backward(self, dy):
        return np.repeat(dy[:, None, :], self._len, axis=1) / self._len


# ======================================================================
# Graph construction
# ======================================================================


class ModelGraph:
    """Ordered layer list plus its config; not thread-safe during training."""

    def __init__(self, config, layers):
        self.config = config
        self.layers = layers

    def param_items(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.param_items():
                yield f"{i}.{layer.kind}.{name}", layer, name, arr


def build_model(config, seed=0):
    """Construct a freshly initialized graph (Kaiming-uniform, zero biases)."""
    rng = np.random.default_rng(seed)

    def kaiming(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    layers = []
    c_in = config.input_ch
    k = config.kernel
    config.block_lengths()  # validates temporal shape algebra
    for i in range(1, config.num_blocks + 1):
        c_out = config.channels(i)
        if config.arch == ARCH_CNN:
            layers.append(Conv1D(kaiming((k, c_in, c_out), k * c_in),
                                 np.zeros(c_out)))
        else:
            layers.append(DepthwiseConv1D(kaiming((k, c_in), k, ),
                                          np.zeros(c_in)))
            layers.append(PointwiseConv1D(kaiming((c_in, c_out), c_in),
                                          np.zeros(c_out)))
        layers.append(BatchNorm1D(c_out))
        layers.append(ReLU())
        if i != config.num_blocks:
            layers.append(MaxPool1D())
        c_in = c_out
    layers.append(GlobalAvgPool())
    layers.append(Dense(kaiming((c_in, config.dense_hidden), c_in),
                        np.zeros(config.dense_hidden)))
    layers.append(ReLU())
    layers.append(Dense(kaiming((config.dense_hidden, config.n_classes),
                                config.dense_hidden),
                        np.zeros(config.n_classes)))
    return ModelGraph(config, layers)


# ======================================================================
# Execution
# ======================================================================


def run_forward(nodes, x, training=False):
    for node in nodes:
        x = node.forward(x, training)
    return x


def run_backward(nodes, dy):
    for node in reversed(nodes):
        dy = node.backward(dy)
    return dy


def forward(graph, x, training=False):
    return run_forward(graph.layers, x, training)


def softmax_cross_entropy(logits, y):
    """Mean CE loss and gradient w.r.t. logits (stable log-sum-exp)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n


def loss_and_grads(graph, x, y, training=True):
    logits = run_forward(graph.layers, x, training)
    loss, dlogits = softmax_cross_entropy(logits, y)
    run_backward(graph.layers, dlogits)
    return loss, logits


# ======================================================================
# Counting
# ======================================================================


def param_count(graph):
    """Learnable parameter count (BatchNorm contributes gamma and beta)."""
    return sum(arr.size for layer in graph.layers
               for _, arr in layer.param_items())


def flop_count(graph, convention="mac"):
    """FLOPs under a documented convention.

    "mac": one unit per multiply-accumulate of the conv/dense layers
    (conv: out_elems * K * Cin; depthwise: out_elems * K; pointwise:
    out_elems * Cin; dense: out * in). Norm/activation/pool layers count
    zero. "two_per_mac" doubles that and adds one per biased output element.
    """
    if convention not in ("mac", "two_per_mac"):
        raise ConfigError(f"unknown flop convention {convention!r}")
    macs = 0
    bias_adds = 0
    for x_shape, layer in zip(_shape_walk(graph), graph.layers):
        L = x_shape[0]
        if layer.kind == "conv":
            k, ci, co = layer.w.shape
            out = (L - k + 1) * co
            macs += out * k * ci
            bias_adds += out
        elif layer.kind == "depthwise":
            k, c = layer.w.shape
            out = (L - k + 1) * c
            macs += out * k
            bias_adds += out
        elif layer.kind == "pointwise":
            ci, co = layer.w.shape
            macs += L * co * ci
            bias_adds += L * co
        elif layer.kind == "dense":
            fi, fo = layer.w.shape
            macs += fi * fo
            bias_adds += fo
    if convention == "mac":
        return macs
    return 2 * macs + bias_adds


def _shape_walk(graph):
    """Input (length, channels) seen by each layer, in order."""
    shapes = []
    L, C = graph.config.input_len, graph.config.input_ch
    for layer in graph.layers:
        shapes.append((L, C))
        if layer.kind in ("conv",):
            k, _, co = layer.w.shape
            L, C = L - k + 1, co
        elif layer.kind == "depthwise":
            L = L - layer.w.shape[0] + 1
        elif layer.kind == "pointwise":
            C = layer.w.shape[1]
        elif layer.kind == "maxpool":
            L = L // 2
        elif layer.kind == "gap":
            L, C = 1, C
        elif layer.kind == "dense":
            C = layer.w.shape[1]
    return shapes


# ======================================================================
# Serialization (hex floats for exact round-trip)
# ======================================================================


def _encode(arr):
    a = np.asarray(arr, dtype=np.float64)
    return {"shape": list(a.shape), "hex": [v.hex() for v in a.ravel().tolist()]}


def _decode(obj):
    a = np.array([float.fromhex(h) for h in obj["hex"]], dtype=np.float64)
    return a.reshape(obj["shape"])


def save_model(graph, path):
    doc = {"version": 1, "config": asdict(graph.config), "layers": []}
    for layer in graph.layers:
        entry = {"kind": layer.kind,
                 "params": {n: _encode(a) for n, a in layer.param_items()},
                 "state": {n: _encode(a) for n, a in layer.state_items()}}
        doc["layers"].append(entry)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_model(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != 1:
        raise StructureError(f"unsupported model file version {doc.get('version')}")
    config = ModelConfig(**doc["config"])
    graph = build_model(config, seed=0)
    if len(graph.layers) != len(doc["layers"]):
        raise StructureError("layer count mismatch between file and config")
    for layer, entry in zip(graph.layers, doc["layers"]):
        if layer.kind != entry["kind"]:
            raise StructureError(
                f"layer kind mismatch: {layer.kind} vs {entry['kind']}")
        for name, obj in entry["params"].items():
            got = _decode(obj)
            if got.shape != getattr(layer, name).shape:
                raise StructureError(f"shape mismatch for {name}")
            setattr(layer, name, got)
        for name, obj in entry["state"].items():
            value = _decode(obj)
            if isinstance(getattr(layer, name), int):
                value = int(value)
            setattr(layer, name, value)
    return graph
