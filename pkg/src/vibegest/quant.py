"""Integer-only quantization: parameter derivation, QAT hooks, and inference.

Scheme
------
* Activations and weights: signed asymmetric per-tensor quantization,
  scale = (max - min) / (2^b - 1), zero point nudged so that real 0 is
  exactly representable. Rounding is half-away-from-zero everywhere.
* Biases: symmetric 32-bit integers at scale s_in * s_w, zero point 0.
* Model input: fixed scale 1 / 2^(b-1), zero point 0 (waveforms already
  live in [-1, 1] after the int16 rescale).
* Each producing layer requantizes its 32-bit accumulator to b bits with
  a fixed-point multiplier: q = clamp(((acc * m0) >> shift) + zp_out),
  where m0/2^shift approximates M = s_in * s_w / s_out to better than
  2^-24 relative error. ReLU is the integer max(zp_out, q). MaxPool is an
  integer max. Global average pooling folds the 1/L into its multiplier.

Batch norm is folded into the preceding conv weights before quantization
(w' = w * gamma/sigma, b' = (b - mu) * gamma/sigma + beta, with sigma from
running statistics), so the integer model contains no norm layers.

`int_forward` is the bit-exact integer interpreter; `fq_forward` runs the
same lattice arithmetic in floats (the quantization-aware evaluation path).
They agree on argmax except for rare ties at requantization boundaries.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import nn
from .errors import QuantizationError, StructureError

ACC_BITS = 32
_ACC_MAX = 1 << (ACC_BITS - 1)
_MULTIPLIER_REL_TOL = 2.0 ** -24


# ======================================================================
# Rounding and quantization parameters
# ======================================================================


def round_half_away(x):
    """Round to nearest integer, halves away from zero (ndarray or scalar)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: float
    zero_point: int
    symmetric: bool

    def __post_init__(self):
        if not self.scale > 0:
            raise QuantizationError(f"scale must be positive, got {self.scale}")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise QuantizationError(
                f"zero point {self.zero_point} outside [{self.qmin}, {self.qmax}]")
        if self.symmetric and self.zero_point != 0:
            raise QuantizationError("symmetric qparams require zero_point 0")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1


def derive_qparams(values, bits, symmetric=False):
    """Per-tensor qparams from observed values.

    The range is nudged to include 0 so the zero point is exact. Degenerate
    tensors: all zeros map to scale 1 / zero point 0; a nonzero constant c
    gets the symmetric scale |c|/qmax so c itself is exactly representable
    (scale 1 could not represent a fractional constant).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise QuantizationError("cannot derive qparams from an empty tensor")
    vmin = float(values.min())
    vmax = float(values.max())
    if not (np.isfinite(vmin) and np.isfinite(vmax)):
        raise QuantizationError("non-finite values in tensor")
    qmin, qmax = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if vmin == vmax:
        if vmin == 0.0:
            return QuantParams(bits, 1.0, 0, True)
        return QuantParams(bits, abs(vmin) / qmax, 0, True)
    if symmetric:
        bound = max(abs(vmin), abs(vmax))
        return QuantParams(bits, bound / qmax, 0, True)
    vmin, vmax = min(vmin, 0.0), max(vmax, 0.0)
    scale = (vmax - vmin) / (qmax - qmin)
    zp = int(round_half_away(qmin - vmin / scale))
    zp = int(np.clip(zp, qmin, qmax))
    return QuantParams(bits, scale, zp, False)


def input_qparams(bits):
    """Fixed input quantization: scale 1/2^(b-1), zero point 0."""
    return QuantParams(bits, 2.0 ** -(bits - 1), 0, True)


def quantize(values, qp):
    q = round_half_away(np.asarray(values, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, qp.qmin, qp.qmax).astype(np.int64)


def dequantize(q, qp):
    return (np.asarray(q, dtype=np.float64) - qp.zero_point) * qp.scale


def fake_quant(x, qp):
    """Quantize-dequantize; returns (y, pass_mask) for the straight-through
    gradient (identity inside the clamp range, zero outside)."""
    q_unc = round_half_away(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    mask = (q_unc >= qp.qmin) & (q_unc <= qp.qmax)
    q = np.clip(q_unc, qp.qmin, qp.qmax)
    return (q - qp.zero_point) * qp.scale, mask


# ======================================================================
# Fixed-point requantization
# ======================================================================


def quantize_multiplier(m):
    """Represent real multiplier m > 0 as (m0, shift): m ~= m0 * 2^-shift.

    m0 is a positive 31-bit integer; the representation error is below
    2^-24 relative (typically ~2^-31)."""
    if not m > 0:
        raise QuantizationError(f"requant multiplier must be positive, got {m}")
    frac = float(m)
    exp = 0
    while frac >= 1.0:
        frac /= 2.0
        exp -= 1
    while frac < 0.5:
        frac *= 2.0
        exp += 1
    m0 = int(round(frac * (1 << 31)))
    if m0 == (1 << 31):
        m0 >>= 1
        exp -= 1
    shift = 31 + exp
    if shift < 0:
        raise QuantizationError(f"multiplier {m} too large for fixed-point form")
    rel = abs(m - m0 * 2.0 ** -shift) / m
    if rel >= _MULTIPLIER_REL_TOL:
        raise QuantizationError(f"multiplier {m} not representable: rel err {rel}")
    return m0, shift


def rounding_rshift(x, shift):
    """(x >> shift) with round-half-away-from-zero, elementwise int64."""
    x = np.asarray(x, dtype=np.int64)
    if shift == 0:
        return x
    add = np.int64(1) << np.int64(shift - 1)
    return np.sign(x) * ((np.abs(x) + add) >> np.int64(shift))


def requantize(acc, m0, shift, zp_out, qmin, qmax):
    """32-bit accumulator -> b-bit output value."""
    acc = np.asarray(acc, dtype=np.int64)
    if np.abs(acc).max(initial=0) >= _ACC_MAX:
        raise QuantizationError("accumulator exceeded 32-bit range")
    q = rounding_rshift(acc * np.int64(m0), shift) + zp_out
    return np.clip(q, qmin, qmax)


# ======================================================================
# Range observers (QAT)
# ======================================================================


class EmaObserver:
    """Running min/max with exponential moving average, momentum 0.99."""

    momentum = 0.99

    def __init__(self):
        self.initialized = False
        self.min = 0.0
        self.max = 0.0

    def update(self, x):
        bmin, bmax = float(np.min(x)), float(np.max(x))
        if not self.initialized:
            self.min, self.max = bmin, bmax
            self.initialized = True
        else:
            m = self.momentum
            self.min = m * self.min + (1 - m) * bmin
            self.max = m * self.max + (1 - m) * bmax

    def qparams(self, bits):
        if not self.initialized:
            raise QuantizationError("observer never saw data")
        return derive_qparams(np.array([self.min, self.max]), bits)


# ======================================================================
# QAT execution nodes
# ======================================================================


class InputFakeQuant(nn.Layer):
    kind = "fq_input"

    def __init__(self, qp):
        self.qp = qp

    def forward(self, x, training=False):
        y, self._mask = fake_quant(x, self.qp)
        return y

    def backward(self, dy):
        return dy * self._mask


class ActFakeQuant(nn.Layer):
    """Fake-quantize an activation; range tracked by an EMA observer."""

    kind = "fq_act"

    def __init__(self, observer, bits):
        self.observer = observer
        self.bits = bits

    def forward(self, x, training=False):
        if training:
            self.observer.update(x)
        if not self.observer.initialized:
            self._mask = np.ones_like(x, dtype=bool)
            return x
        y, self._mask = fake_quant(x, self.observer.qparams(self.bits))
        return y

    def backward(self, dy):
        return dy * self._mask


class WeightFakeQuant(nn.Layer):
    """Run an inner conv/dense layer with quantize-dequantized weights.

    The weight range is taken from the tensor itself each step, so the
    clamp never bites and the straight-through gradient is the identity.
    Biases stay in float during training. The original float weights are
    restored after backward so the optimizer updates them directly."""

    def __init__(self, inner, bits):
        self.inner = inner
        self.bits = bits
        self.kind = "fq_" + inner.kind

    def forward(self, x, training=False):
        self._orig_w = self.inner.w
        qp = derive_qparams(self.inner.w, self.bits)
        self.inner.w, _ = fake_quant(self.inner.w, qp)
        return self.inner.forward(x, training)

    def backward(self, dy):
        dx = self.inner.backward(dy)
        self.inner.w = self._orig_w
        return dx

    def param_items(self):
        return self.inner.param_items()

    def grad_items(self):
        return self.inner.grad_items()


def build_qat_nodes(graph, bits, observers=None):
    """Execution node list for QAT over an (unfolded) graph.

    Returns (nodes, observers); observers are ordered exactly like the
    quantization points `quantize_model` will assign."""
    obs_iter = iter(observers) if observers is not None else None
    made = []

    def next_obs():
        if obs_iter is not None:
            return next(obs_iter)
        o = EmaObserver()
        made.append(o)
        return o

    nodes = [InputFakeQuant(input_qparams(bits))]
    layers = graph.layers
    for idx, layer in enumerate(layers):
        if layer.kind in ("conv", "depthwise", "pointwise", "dense"):
            nodes.append(WeightFakeQuant(layer, bits))
        else:
            nodes.append(layer)
        is_last = idx == len(layers) - 1
        if (layer.kind in ("depthwise", "relu", "gap")
                or (layer.kind == "dense" and is_last)):
            nodes.append(ActFakeQuant(next_obs(), bits))
    return nodes, observers if observers is not None else made


# ======================================================================
# Batch-norm folding
# ======================================================================


def calibrate_bn(graph, x, passes=1):
    """Populate BN running statistics with training-mode forwards (PTQ aid)."""
    for _ in range(passes):
        nn.run_forward(graph.layers, x, training=True)
    return graph


def fold_bn(graph):
    """Fold every BatchNorm into its preceding conv; returns a new graph.

    Inference behavior is preserved to float round-off. Raises
    StructureError if a BN does not follow a conv-type layer or its
    running statistics were never updated."""
    folded = []
    layers = graph.layers
    i = 0
    while i < len(layers):
        layer = layers[i]
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if nxt is not None and nxt.kind == "bn":
            if layer.kind not in ("conv", "pointwise"):
                raise StructureError(
                    f"BatchNorm after {layer.kind!r}; expected a conv layer")
            if not nxt.seen_batches:
                raise StructureError(
                    "BatchNorm running statistics never updated; "
                    "train or calibrate before folding")
            sigma = np.sqrt(nxt.running_var + nxt.eps)
            g = nxt.gamma / sigma
            w = layer.w * g  # out-channel axis is last for conv and pointwise
            b = (layer.b - nxt.running_mean) * g + nxt.beta
            new = copy.deepcopy(layer)
            new.w, new.b = w, b
            folded.append(new)
            i += 2
        elif layer.kind == "bn":
            raise StructureError("BatchNorm without a preceding conv layer")
        else:
            folded.append(copy.deepcopy(layer))
            i += 1
    return nn.ModelGraph(graph.config, folded)


# ======================================================================
# Quantized model
# ======================================================================


@dataclass
class QOp:
    """One integer op: linear kinds carry weights and a requant stage."""

    kind: str            # conv | depthwise | pointwise | dense | maxpool | gap
    relu: bool
    in_len: int
    in_ch: int
    out_len: int
    out_ch: int
    k: int
    w_q: np.ndarray | None = None
    b_q: np.ndarray | None = None
    qp_in: QuantParams | None = None
    qp_w: QuantParams | None = None
    qp_out: QuantParams | None = None
    m0: int = 0
    shift: int = 0

    @property
    def zp_in(self):
        return self.qp_in.zero_point

    @property
    def zp_out(self):
        return self.qp_out.zero_point


@dataclass
class QuantizedModel:
    bits: int
    input_qp: QuantParams
    ops: list
    config: nn.ModelConfig


_LINEAR_KINDS = ("conv", "depthwise", "pointwise", "dense")


def _op_skeleton(folded):
    """Pair conv-type layers with fused ReLUs; track shapes."""
    cfg = folded.config
    entries = []
    layers = folded.layers
    L, C = cfg.input_len, cfg.input_ch
    i = 0
    while i < len(layers):
        layer = layers[i]
        relu = (i + 1 < len(layers)) and layers[i + 1].kind == "relu"
        if layer.kind == "conv":
            k, ci, co = layer.w.shape
            entries.append(("conv", layer, relu, L, ci, L - k + 1, co, k))
            L, C = L - k + 1, co
        elif layer.kind == "depthwise":
            k, c = layer.w.shape
            relu = False  # never fused on the depthwise half
            entries.append(("depthwise", layer, relu, L, c, L - k + 1, c, k))
            L = L - k + 1
        elif layer.kind == "pointwise":
            ci, co = layer.w.shape
            entries.append(("pointwise", layer, relu, L, ci, L, co, 1))
            C = co
        elif layer.kind == "dense":
            fi, fo = layer.w.shape
            entries.append(("dense", layer, relu, 1, fi, 1, fo, 1))
            C = fo
        elif layer.kind == "maxpool":
            entries.append(("maxpool", layer, False, L, C, L // 2, C, 2))
            L = L // 2
            relu = False
        elif layer.kind == "gap":
            entries.append(("gap", layer, False, L, C, 1, C, 0))
            L = 1
            relu = False
        elif layer.kind == "relu":
            i += 1
            continue
        else:
            raise StructureError(f"cannot quantize layer kind {layer.kind!r}")
        i += 2 if relu else 1
    return entries


def quantize_model(graph, bits, calib_x, observers=None):
    """Fold BN and convert a trained graph to integer-only form.

    Activation ranges come from `observers` (QAT, in `build_qat_nodes`
    order) when given, else from a calibration forward over `calib_x`."""
    folded = fold_bn(graph)
    entries = _op_skeleton(folded)
    in_qp = input_qparams(bits)

    obs_iter = iter(observers) if observers is not None else None
    x, _ = fake_quant(np.asarray(calib_x, dtype=np.float64), in_qp)

    ops = []
    qp_prev = in_qp
    for kind, layer, relu, in_len, in_ch, out_len, out_ch, k in entries:
        if kind == "maxpool":
            x = layer.forward(x)
            ops.append(QOp(kind, False, in_len, in_ch, out_len, out_ch, k,
                           qp_in=qp_prev, qp_out=qp_prev))
            continue
        y = layer.forward(x)
        if relu:
            y = np.maximum(y, 0.0)
        if obs_iter is not None:
            qp_out = next(obs_iter).qparams(bits)
        else:
            qp_out = derive_qparams(y, bits)
        op = QOp(kind, relu, in_len, in_ch, out_len, out_ch, k,
                 qp_in=qp_prev, qp_out=qp_out)
        if kind == "gap":
            m = qp_prev.scale / (qp_out.scale * in_len)
        else:
            qp_w = derive_qparams(layer.w, bits)
            op.qp_w = qp_w
            op.w_q = quantize(layer.w, qp_w)
            bias_scale = qp_prev.scale * qp_w.scale
            b_q = round_half_away(layer.b / bias_scale)
            if np.abs(b_q).max(initial=0) >= _ACC_MAX:
                raise QuantizationError("bias exceeds 32-bit range")
            op.b_q = b_q.astype(np.int64)
            m = bias_scale / qp_out.scale
        op.m0, op.shift = quantize_multiplier(m)
        ops.append(op)
        x, _ = fake_quant(y, qp_out)
        qp_prev = qp_out
    return QuantizedModel(bits=bits, input_qp=in_qp, ops=ops,
                          config=graph.config)


# ======================================================================
# Integer inference
# ======================================================================


def quantize_input(x, qm):
    return quantize(x, qm.input_qp)


def _acc_check(acc, kind):
    if np.abs(acc).max(initial=0) >= _ACC_MAX:
        raise QuantizationError(f"{kind} accumulator exceeded 32-bit range")


def int_forward(qm, q):
    """Bit-exact integer interpreter. `q` is (B, L, C) int64, already
    quantized with the model's input qparams."""
    q = np.asarray(q)
    if not np.issubdtype(q.dtype, np.integer):
        raise QuantizationError("int_forward expects integer input")
    q = q.astype(np.int64)
    qp = qm.input_qp
    if q.min(initial=0) < qp.qmin or q.max(initial=0) > qp.qmax:
        raise QuantizationError("input outside the quantized range")
    x = q
    for op in qm.ops:
        if op.kind == "maxpool":
            B, L, C = x.shape
            Lo = L // 2
            x = x[:, :Lo * 2, :].reshape(B, Lo, 2, C).max(axis=2)
            continue
        if op.kind == "gap":
            acc = (x - op.zp_in).sum(axis=1)
            _acc_check(acc, "gap")
            # (B, C) feature vector from here on
            x = requantize(acc, op.m0, op.shift, op.zp_out,
                           op.qp_out.qmin, op.qp_out.qmax)
            continue
        zin, zw = op.zp_in, op.qp_w.zero_point
        if op.kind == "conv":
            win = sliding_window_view(x - zin, op.k, axis=1)
            acc = np.einsum("blck,kco->blo", win, op.w_q - zw, optimize=True)
        elif op.kind == "depthwise":
            win = sliding_window_view(x - zin, op.k, axis=1)
            acc = np.einsum("blck,kc->blc", win, op.w_q - zw, optimize=True)
        elif op.kind == "pointwise":
            acc = (x - zin) @ (op.w_q - zw)
        else:  # dense on (B, C)
            acc = (x - zin) @ (op.w_q - zw)
        acc = acc + op.b_q
        _acc_check(acc, op.kind)
        x = requantize(acc, op.m0, op.shift, op.zp_out,
                       op.qp_out.qmin, op.qp_out.qmax)
        if op.relu:
            x = np.maximum(x, op.zp_out)
    return x  # integer logits (B, n_classes)


def fq_forward(qm, x_real):
    """Float forward over the quantized lattice (QAT-style evaluation).

    Uses the dequantized integer weights and fake-quantizes every
    activation with the model's qparams; differs from `int_forward` only
    by requantization rounding at scale boundaries."""
    x, _ = fake_quant(np.asarray(x_real, dtype=np.float64), qm.input_qp)
    for op in qm.ops:
        if op.kind == "maxpool":
            B, L, C = x.shape
            Lo = L // 2
            x = x[:, :Lo * 2, :].reshape(B, Lo, 2, C).max(axis=2)
            continue
        if op.kind == "gap":
            y = x.mean(axis=1)
        else:
            w = dequantize(op.w_q, op.qp_w)
            b = op.b_q * (op.qp_in.scale * op.qp_w.scale)
            if op.kind == "conv":
                win = sliding_window_view(x, op.k, axis=1)
                y = np.einsum("blck,kco->blo", win, w, optimize=True) + b
            elif op.kind == "depthwise":
                win = sliding_window_view(x, op.k, axis=1)
                y = np.einsum("blck,kc->blc", win, w, optimize=True) + b
            else:
                y = x @ w + b
            if op.relu:
                y = np.maximum(y, 0.0)
        x, _ = fake_quant(y, op.qp_out)
    return x


# ======================================================================
# Serialization
# ======================================================================


def _qp_doc(qp):
    if qp is None:
        return None
    return {"bits": qp.bits, "scale": qp.scale.hex(),
            "zero_point": qp.zero_point, "symmetric": qp.symmetric}


def _qp_parse(doc):
    if doc is None:
        return None
    return QuantParams(doc["bits"], float.fromhex(doc["scale"]),
                       doc["zero_point"], doc["symmetric"])


def save_quantized(qm, path):
    ops = []
    for op in qm.ops:
        ops.append({
            "kind": op.kind, "relu": op.relu,
            "in_len": op.in_len, "in_ch": op.in_ch,
            "out_len": op.out_len, "out_ch": op.out_ch, "k": op.k,
            "w_q": None if op.w_q is None else
                {"shape": list(op.w_q.shape), "data": op.w_q.ravel().tolist()},
            "b_q": None if op.b_q is None else op.b_q.tolist(),
            "qp_in": _qp_doc(op.qp_in), "qp_w": _qp_doc(op.qp_w),
            "qp_out": _qp_doc(op.qp_out),
            "m0": op.m0, "shift": op.shift,
        })
    doc = {"version": 1, "bits": qm.bits, "input_qp": _qp_doc(qm.input_qp),
           "config": asdict(qm.config), "ops": ops}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_quantized(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != 1:
        raise StructureError(f"unsupported file version {doc.get('version')}")
    ops = []
    for o in doc["ops"]:
        w_q = None
        if o["w_q"] is not None:
            w_q = np.array(o["w_q"]["data"], dtype=np.int64).reshape(o["w_q"]["shape"])
        b_q = None if o["b_q"] is None else np.array(o["b_q"], dtype=np.int64)
        ops.append(QOp(o["kind"], o["relu"], o["in_len"], o["in_ch"],
                       o["out_len"], o["out_ch"], o["k"], w_q, b_q,
                       _qp_parse(o["qp_in"]), _qp_parse(o["qp_w"]),
                       _qp_parse(o["qp_out"]), o["m0"], o["shift"]))
    return QuantizedModel(bits=doc["bits"], input_qp=_qp_parse(doc["input_qp"]),
                          ops=ops, config=nn.ModelConfig(**doc["config"]))
