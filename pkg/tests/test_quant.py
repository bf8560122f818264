"""Quantization: qparams, fixed-point requantization, QAT nodes, BN folding.

Property tests use hypothesis for the lattice arithmetic; model-level
checks ride the shared trained fixture.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_quantized, random_quantized_input
from vibegest import nn, quant
from vibegest.errors import QuantizationError, StructureError

BITS = st.sampled_from([4, 6, 8])
FINITE = st.floats(min_value=-1e4, max_value=1e4, allow_nan=False,
                   allow_infinity=False, width=32)


# ----------------------------------------------------------------------
# Quantization parameters
# ----------------------------------------------------------------------


def test_derive_qparams_spans_an_asymmetric_range_exactly():
    qp = quant.derive_qparams(np.array([0.0, 2.55]), 8)
    assert qp.scale == pytest.approx(0.01)
    assert qp.zero_point == -128
    assert (qp.qmin, qp.qmax) == (-128, 127)


def test_derive_qparams_symmetric_unit_range():
    qp = quant.derive_qparams(np.array([-1.0, 1.0]), 8, symmetric=True)
    assert qp.scale == pytest.approx(1.0 / 127.0)
    assert qp.zero_point == 0


def test_derive_qparams_degenerate_inputs():
    qp = quant.derive_qparams(np.zeros(5), 8)
    assert (qp.scale, qp.zero_point) == (1.0, 0)
    qp = quant.derive_qparams(np.full(3, 3.0), 8)
    assert qp.scale == pytest.approx(3.0 / 127.0)
    assert qp.zero_point == 0
    with pytest.raises(QuantizationError):
        quant.derive_qparams(np.array([]), 8)
    with pytest.raises(QuantizationError):
        quant.derive_qparams(np.array([1.0, np.nan]), 8)


@given(st.lists(FINITE, min_size=1, max_size=32), BITS)
@settings(max_examples=200, deadline=None)
def test_round_trip_error_bounded_by_half_scale(values, bits):
    v = np.array(values, dtype=np.float64)
    qp = quant.derive_qparams(v, bits)
    back = quant.dequantize(quant.quantize(v, qp), qp)
    assert np.all(np.abs(back - v) <= qp.scale / 2 * (1 + 1e-9) + 1e-12)


@given(st.lists(FINITE, min_size=1, max_size=32), BITS)
@settings(max_examples=100, deadline=None)
def test_derived_range_always_represents_zero(values, bits):
    qp = quant.derive_qparams(np.array(values), bits)
    assert qp.qmin <= qp.zero_point <= qp.qmax
    zero = quant.dequantize(quant.quantize(np.array([0.0]), qp), qp)
    assert zero[0] == 0.0


def test_input_qparams_power_of_two_scale():
    for bits in (4, 6, 8):
        qp = quant.input_qparams(bits)
        assert qp.scale == 2.0 ** -(bits - 1)
        assert qp.zero_point == 0
        # PCM-normalized input in [-1, 1] maps onto the full code range
        assert quant.quantize(np.array([1.0]), qp)[0] == qp.qmax
        assert quant.quantize(np.array([-1.0]), qp)[0] == qp.qmin


def test_quantize_clips_out_of_range_values():
    qp = quant.QuantParams(bits=8, scale=0.1, zero_point=0, symmetric=True)
    q = quant.quantize(np.array([-1e9, 1e9]), qp)
    assert q.tolist() == [qp.qmin, qp.qmax]


# ----------------------------------------------------------------------
# Fixed-point multiplier and rounding
# ----------------------------------------------------------------------


@given(st.floats(min_value=1e-8, max_value=0.999, allow_nan=False))
@settings(max_examples=300, deadline=None)
def test_quantize_multiplier_precision(m):
    m0, shift = quant.quantize_multiplier(m)
    assert 2 ** 30 <= m0 < 2 ** 31
    recon = m0 / 2.0 ** shift
    assert abs(recon - m) / m < 2.0 ** -24


def test_quantize_multiplier_rejects_bad_values():
    with pytest.raises(QuantizationError):
        quant.quantize_multiplier(0.0)
    with pytest.raises(QuantizationError):
        quant.quantize_multiplier(-0.25)
    with pytest.raises(QuantizationError):
        quant.quantize_multiplier(2.0 ** 40)  # shift would go negative


def test_round_half_away_from_zero():
    x = np.array([0.5, -0.5, 1.5, 2.5, -2.5, 2.4, -2.4])
    assert quant.round_half_away(x).tolist() == [1, -1, 2, 3, -3, 2, -2]


def test_rounding_rshift_known_vectors():
    x = np.array([5, -5, 3, 4, 1, -1, 0])
    assert quant.rounding_rshift(x, 1).tolist() == [3, -3, 2, 2, 1, -1, 0]
    np.testing.assert_array_equal(quant.rounding_rshift(x, 0), x)
    assert quant.rounding_rshift(np.array([2 ** 20 + 2 ** 9]), 10)[0] == 1025


def test_requantize_scales_by_the_encoded_multiplier():
    m0, shift = quant.quantize_multiplier(0.5)
    out = quant.requantize(np.array([10, -7]), m0, shift, 0, -128, 127)
    assert out.tolist() == [5, -4]  # -3.5 rounds away from zero
    out = quant.requantize(np.array([1000]), m0, shift, 0, -128, 127)
    assert out.tolist() == [127]  # clipped to the activation range


def test_requantize_guards_the_accumulator_width():
    m0, shift = quant.quantize_multiplier(0.5)
    with pytest.raises(QuantizationError):
        quant.requantize(np.array([2 ** 31]), m0, shift, 0, -128, 127)


# ----------------------------------------------------------------------
# Fake quantization and observers
# ----------------------------------------------------------------------


def test_fake_quant_projects_onto_the_lattice_and_masks_clipping():
    qp = quant.QuantParams(bits=4, scale=0.5, zero_point=0, symmetric=True)
    x = np.array([0.2, 0.6, 100.0, -100.0])
    y, mask = quant.fake_quant(x, qp)
    codes = y / qp.scale
    np.testing.assert_allclose(codes, np.round(codes))
    assert mask.tolist() == [True, True, False, False]
    assert y[2] == qp.qmax * qp.scale and y[3] == qp.qmin * qp.scale


def test_ema_observer_tracks_a_constant_stream():
    obs = quant.EmaObserver()
    x = np.array([-2.0, 1.0])
    for _ in range(400):
        obs.update(x)
    qp = obs.qparams(8)
    lo, hi = qp.scale * (qp.qmin - qp.zero_point), qp.scale * (qp.qmax - qp.zero_point)
    assert lo == pytest.approx(-2.0, abs=0.02)
    assert hi == pytest.approx(1.0, abs=0.02)


def test_qat_nodes_order_and_observer_count(tiny_config):
    graph = nn.build_model(tiny_config, seed=0)
    nodes, observers = quant.build_qat_nodes(graph, 8)
    assert isinstance(nodes[0], quant.InputFakeQuant)
    wrapped = [n for n in nodes if isinstance(n, quant.WeightFakeQuant)]
    linear = [l for l in graph.layers
              if l.kind in ("conv", "depthwise", "pointwise", "dense")]
    assert len(wrapped) == len(linear)
    # one activation observer per quantization point quantize_model assigns
    rng = np.random.default_rng(0)
    calib = rng.uniform(-1, 1, (4, tiny_config.input_len, tiny_config.input_ch))
    quant.calibrate_bn(graph, calib)
    qm = quant.quantize_model(graph, 8, calib)
    assert len(observers) == sum(op.kind != "maxpool" for op in qm.ops)


def test_straight_through_estimator_masks_clipped_positions():
    qp = quant.input_qparams(8)
    node = quant.InputFakeQuant(qp)
    x = np.array([[0.25, 5.0]])
    node.forward(x, training=True)
    dy = np.ones_like(x)
    dx = node.backward(dy)
    assert dx.tolist() == [[1.0, 0.0]]  # clipped lane passes no gradient


# ----------------------------------------------------------------------
# BN folding
# ----------------------------------------------------------------------


def test_fold_bn_preserves_fp32_forward(trained_tiny, tiny_arrays):
    x, _ = tiny_arrays["val"]
    folded = quant.fold_bn(trained_tiny.graph)
    before = nn.forward(trained_tiny.graph, x)
    after = nn.forward(folded, x)
    np.testing.assert_allclose(after, before, atol=1e-5, rtol=0)
    assert not any(l.kind == "bn" for l in folded.layers)


def test_fold_bn_refuses_unusual_structures():
    cfg = nn.ModelConfig(num_blocks=1, input_len=20)
    graph = nn.build_model(cfg, seed=0)
    with pytest.raises(StructureError, match="never updated"):
        quant.fold_bn(graph)

    calib = np.random.default_rng(0).uniform(-1, 1, (4, 20, 4))
    quant.calibrate_bn(graph, calib)
    # BN behind a non-conv layer
    twisted = nn.ModelGraph(cfg, list(graph.layers))
    i = next(i for i, l in enumerate(twisted.layers) if l.kind == "bn")
    twisted.layers[i - 1], twisted.layers[i] = \
        twisted.layers[i], twisted.layers[i - 1]
    with pytest.raises(StructureError, match="BatchNorm"):
        quant.fold_bn(twisted)


# ----------------------------------------------------------------------
# Whole-model quantization
# ----------------------------------------------------------------------


def test_weight_round_trip_error_monotone_in_bitwidth(trained_tiny):
    conv = next(l for l in trained_tiny.graph.layers if l.kind == "conv")
    errs = []
    for bits in (4, 6, 8):
        qp = quant.derive_qparams(conv.w, bits)
        back = quant.dequantize(quant.quantize(conv.w, qp), qp)
        errs.append(float(np.abs(back - conv.w).max()))
    assert errs[0] > errs[1] > errs[2]


def test_model_representation_error_monotone_in_bitwidth(trained_tiny,
                                                         tiny_arrays):
    """Total round-trip error of every weight and activation tensor the
    quantized model touches shrinks as the lattice gets finer."""
    x, _ = tiny_arrays["val"]
    folded = quant.fold_bn(trained_tiny.graph)
    acts = []
    cur = x[:16].astype(np.float64)
    for layer in folded.layers:
        cur = layer.forward(cur)
        acts.append(cur)
    tensors = [l.w for l in folded.layers if l.kind in
               ("conv", "depthwise", "pointwise", "dense")] + acts
    totals = []
    for bits in (4, 6, 8):
        err = 0.0
        for t in tensors:
            qp = quant.derive_qparams(t, bits)
            back = quant.dequantize(quant.quantize(t, qp), qp)
            err += float(np.abs(back - t).max())
        totals.append(err)
    assert totals[0] > totals[1] > totals[2]


def test_int_forward_agrees_with_fake_quant_forward(quantized_tiny, tiny_arrays):
    x, _ = tiny_arrays["val"]
    q = quant.quantize_input(x.astype(np.float64), quantized_tiny)
    int_pred = quant.int_forward(quantized_tiny, q).argmax(axis=1)
    fq_pred = quant.fq_forward(quantized_tiny, x).argmax(axis=1)
    assert (int_pred == fq_pred).mean() >= 0.9


def test_int_forward_validates_input(quantized_tiny):
    with pytest.raises(QuantizationError):
        quant.int_forward(quantized_tiny, np.zeros((1, 4, 4), dtype=np.float32))
    bad = np.full((1, quantized_tiny.config.input_len,
                   quantized_tiny.config.input_ch), 999, dtype=np.int64)
    with pytest.raises(QuantizationError):
        quant.int_forward(quantized_tiny, bad)


def test_oversized_bias_is_rejected():
    cfg = nn.ModelConfig(num_blocks=1, input_len=20)
    graph = nn.build_model(cfg, seed=1)
    calib = np.random.default_rng(2).uniform(-1, 1, (4, 20, 4))
    quant.calibrate_bn(graph, calib)
    folded_source = next(l for l in graph.layers if l.kind == "conv")
    folded_source.b = folded_source.b + 1e9
    with pytest.raises(QuantizationError, match="bias"):
        quant.quantize_model(graph, 8, calib)


def test_quantized_model_save_load_round_trip(tmp_path, quantized_tiny):
    path = tmp_path / "model.qjson"
    quant.save_quantized(quantized_tiny, path)
    back = quant.load_quantized(path)
    assert back.bits == quantized_tiny.bits
    assert len(back.ops) == len(quantized_tiny.ops)
    q = random_quantized_input(back, n=3, seed=4)
    np.testing.assert_array_equal(quant.int_forward(back, q),
                                  quant.int_forward(quantized_tiny, q))
    for a, b in zip(quantized_tiny.ops, back.ops):
        assert (a.kind, a.m0, a.shift) == (b.kind, b.m0, b.shift)
        if a.w_q is not None:
            np.testing.assert_array_equal(a.w_q, b.w_q)


def test_random_model_quantizes_at_every_bitwidth():
    for bits in (4, 6, 8):
        qm = random_quantized(arch=nn.ARCH_SEPCNN, num_blocks=2,
                              bits=bits, input_len=32, seed=bits)
        q = random_quantized_input(qm, n=2, seed=bits)
        logits = quant.int_forward(qm, q)
        assert logits.shape == (2, 4)
        assert logits.min() >= qm.ops[-1].qp_out.qmin
        assert logits.max() <= qm.ops[-1].qp_out.qmax
