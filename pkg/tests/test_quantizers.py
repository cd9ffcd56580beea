import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qmoe.errors import IntegrityError, ParameterError
from qmoe.quantizers import (PackedWeights, QuantizedLayer, QuantScheme, code_range, dequantize,
                             layer_size_bytes, model_size_report, quantize_activations,
                             quantize_bitlinear, quantize_layer, quantize_sign, quantize_ternary,
                             round_half_away)


def test_round_half_away():
    assert round_half_away([0.5, -0.5, 1.5, -2.5, 0.49]).tolist() == [1, -1, 2, -3, 0]


def test_scheme_parse_and_tags():
    assert QuantScheme.parse("q4") == QuantScheme.bitlinear(4)
    assert QuantScheme.parse("BitNet") == QuantScheme.ternary()
    assert QuantScheme.parse("ptq") == QuantScheme.bitwise()
    for s in [QuantScheme.float32(), QuantScheme.bitlinear(8), QuantScheme.ternary(),
              QuantScheme.bitwise()]:
        assert QuantScheme.from_tag(s.tag, s.bits) == s
    with pytest.raises(ParameterError):
        QuantScheme.bitlinear(3)


def test_bitlinear_k8_example():
    # zero-mean variant of the worked example: 63.5 rounds away from zero
    W = np.array([1.27, -1.27, 0.635, 0.0, -0.635], dtype=np.float32)
    codes, s, mu = quantize_bitlinear(W, 8)
    assert abs(s - 0.01) < 1e-7 and mu == 0.0
    assert codes.tolist() == [127, -127, 64, 0, -64]
    layer = quantize_layer(W.reshape(1, 5), None, QuantScheme.bitlinear(8))
    assert np.allclose(dequantize(layer)[0], [1.27, -1.27, 0.64, 0.0, -0.64], atol=1e-6)


def test_bitlinear_k2_example():
    codes, s, _ = quantize_bitlinear(np.array([0.9, -0.9, 0.45, -0.45]), 2)
    assert abs(s - 0.9) < 1e-7
    assert codes.tolist() == [1, -1, 1, -1]


@pytest.mark.parametrize("k", [2, 4, 8, 16])
def test_bitlinear_all_zero(k):
    codes, s, _ = quantize_bitlinear(np.zeros((3, 4)), k)
    assert s == 1e-8 and not codes.any()


def test_bitlinear_bad_k():
    with pytest.raises(ParameterError):
        quantize_bitlinear(np.ones(3), 1)


@pytest.mark.parametrize("k", [2, 4, 8, 16])
def test_bitlinear_roundtrip_half_step(k, nprng):
    for _ in range(50):
        W = (nprng.standard_normal((8, 9)) + nprng.uniform(-2, 2)).astype(np.float32)
        layer = quantize_layer(W, None, QuantScheme.bitlinear(k))
        s = float(layer.weight_scale[0])
        assert np.abs(dequantize(layer) - W).max() <= s / 2 + 1e-6
        lo, hi = code_range(k)
        c = layer.codes()
        assert c.min() >= lo and c.max() <= hi


def test_sign_examples():
    codes, s = quantize_sign(np.array([0.3, -0.2, 0.0]))
    assert codes.tolist() == [1, -1, 1]
    assert abs(s - 0.5 / 3) < 1e-7
    W = np.abs(np.random.default_rng(0).standard_normal(20)) + 0.1
    assert (quantize_sign(W)[0] == 1).all()
    codes, s = quantize_sign(W)
    assert np.abs(codes * s - W).max() <= np.abs(W).max()


def test_ternary_examples():
    assert quantize_ternary(np.array([0.5, -0.02, 0.1, -0.3]), 0.05).tolist() == [1, 0, 1, -1]
    assert not quantize_ternary(np.array([0.5, -0.2]), 0.6).any()
    assert quantize_ternary(np.array([0.5, 0.0, -0.2]), 0.0).tolist() == [1, 0, -1]
    with pytest.raises(ParameterError):
        quantize_ternary(np.ones(2), -0.1)


def test_ternary_alphabet_fuzz(nprng):
    for _ in range(200):
        W = nprng.standard_normal(50) * nprng.uniform(0.01, 2)
        assert set(np.unique(quantize_ternary(W, abs(nprng.standard_normal()) * 0.3))) <= {-1, 0, 1}


def test_ternary_zero_codes_dequantize_to_zero():
    layer = quantize_layer(np.full((2, 3), 0.01), None, QuantScheme.ternary(), tau=0.5)
    assert not dequantize(layer).any()


def test_activation_examples():
    codes, s = quantize_activations(np.array([2.0, -1.0, 0.5]))
    assert s == 63.5 and codes.tolist() == [127, -64, 32]
    codes, s = quantize_activations(np.zeros(4))
    assert s == 1.0 and not codes.any()


def test_activation_roundtrip_bound(nprng):
    for _ in range(1000):
        x = nprng.standard_normal(16) * nprng.uniform(0.01, 10)
        codes, s = quantize_activations(x)
        assert np.abs(codes / s - x).max() <= 0.5 / s + 1e-12


@pytest.mark.parametrize("bits", [1, 2, 4, 8, 16])
def test_pack_unpack_exact_all_lengths(bits, nprng):
    lo, hi = code_range(bits)
    for n in range(1, 258):
        if bits == 1:
            codes = nprng.choice([-1, 1], n)
        else:
            codes = nprng.integers(lo, hi + 1, n)
        packed = PackedWeights.pack(codes, bits)
        assert packed.nbytes == math.ceil(n * bits / 8)
        assert np.array_equal(packed.unpack(), codes)


def test_packing_layout_is_lsb_first_offset_binary():
    # codes -8, 7 at 4 bits store 0 and 15 -> byte 0xF0
    assert PackedWeights.pack(np.array([-8, 7]), 4).payload == b"\xf0"
    assert PackedWeights.pack(np.array([1, -1, -1, 1]), 1).payload == b"\x09"


def test_pack_rejects_out_of_range_codes():
    with pytest.raises(ParameterError):
        PackedWeights.pack(np.array([2]), 2)


def test_corrupt_payload_length_is_integrity_error():
    with pytest.raises(IntegrityError):
        PackedWeights(4, b"\x00", 5)
    with pytest.raises(IntegrityError):
        QuantizedLayer(2, 2, QuantScheme.bitlinear(4), PackedWeights.pack(np.zeros(3), 4))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.sampled_from([2, 4, 8, 16]))
def test_codes_stay_in_clip_range(m, n, k):
    W = np.random.default_rng(m * 100 + n).standard_normal((m, n)) * 3
    W[0, 0] = -50.0  # outlier below the mean
    codes, _, _ = quantize_bitlinear(W, k)
    lo, hi = code_range(k)
    assert codes.min() >= lo and codes.max() <= hi


def test_size_single_fp32_layer():
    layer = quantize_layer(np.ones((2, 2)), None, QuantScheme.float32())
    assert layer_size_bytes(layer) == 16
    assert model_size_report([layer]).total_bytes == 16 + 16


def test_size_monotone_in_bits(nprng):
    W = nprng.standard_normal((32, 48))
    sizes = []
    for k in (1, 2, 4, 8, 16):
        sizes.append(model_size_report([quantize_layer(W, np.zeros(32), QuantScheme.bitlinear(k))])
                     .total_bytes)
    assert sizes == sorted(sizes) and len(set(sizes)) == 5


def test_fp32_reference_row():
    # 1,206,770 float32 params -> 4,827,080 bytes; within 1% of the 4,830.8 KB reference
    assert 1_206_770 * 4 == 4_827_080
    assert abs(4_827_080 / 1000 - 4830.8) / 4830.8 < 0.01
