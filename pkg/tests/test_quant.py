import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qsharddp import quant
from qsharddp.core import NonFiniteError, SeededRng, fill_gaussian
from qsharddp.quant import QuantizedChunk, WireFormatError


def reference_codes(x, k, G):
    """Scalar reference quantizer written independently of the vectorized one."""
    qmax = 2 ** (k - 1) - 1
    codes, scales = [], []
    for start in range(0, len(x), G):
        grp = [float(np.float32(v)) for v in x[start : start + G]]
        s = float(np.float32(max(abs(v) for v in grp)))
        scales.append(s)
        for v in grp:
            if s == 0:
                codes.append(0)
                continue
            y = float(np.float32(np.float32(v) / np.float32(s)) * np.float32(qmax))
            codes.append(int(math.copysign(math.floor(abs(y) + 0.5), y)))
    return codes, scales


finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)
vectors = hnp.arrays(np.float32, st.integers(1, 300), elements=finite32)


def test_zero_group():
    c = quant.quantize(np.zeros(4), 4, 4)
    assert list(c.codes()) == [0, 0, 0, 0]
    assert c.scales.tolist() == [0.0]
    np.testing.assert_array_equal(quant.dequantize(c), np.zeros(4))


def test_rounding_example():
    c = quant.quantize([0.5, -0.25, 1.0, 0.0], 4, 4)
    assert c.scales.tolist() == [1.0]
    assert list(c.codes()) == [4, -2, 7, 0]
    np.testing.assert_allclose(quant.dequantize(c), [4 / 7, -2 / 7, 1.0, 0.0], rtol=1e-6)


def test_endpoints_exact():
    c = quant.quantize([7, -7], 4, 2)
    assert list(c.codes()) == [7, -7] and c.scales.tolist() == [7.0]
    np.testing.assert_array_equal(quant.dequantize(c), [7.0, -7.0])


def test_all_zero_codes_dequantize_to_zero():
    c = QuantizedChunk(4, 4, 8, np.zeros(4, np.uint8), np.array([3.0, 5.0], np.float32))
    np.testing.assert_array_equal(quant.dequantize(c), np.zeros(8))


def test_nibble_layout():
    c = quant.quantize([1.0, -1.0, 0.0], 4, 3)
    # codes 7, -7, 0: element 0 low nibble, element 1 high nibble, odd tail padded with 0
    assert c.packed.tolist() == [0x97, 0x00]


@given(vectors, st.sampled_from([4, 8]), st.integers(1, 70))
def test_matches_reference(x, k, G):
    codes, scales = reference_codes(x, k, G)
    c = quant.quantize(x, k, G)
    assert c.codes().tolist() == codes
    assert c.scales.tolist() == scales


@given(vectors, st.sampled_from([4, 8]), st.integers(1, 70))
def test_invariants(x, k, G):
    c = quant.quantize(x, k, G)
    qmax = 2 ** (k - 1) - 1
    codes = c.codes().astype(int)
    assert np.abs(codes).max() <= qmax
    assert c.packed.size == -(-x.size * k // 8)
    assert (c.scales >= 0).all() and c.scales.size == -(-x.size // G)
    xhat = quant.dequantize(c)
    s = np.repeat(c.scales, G)[: x.size].astype(np.float64)
    err = np.abs(x.astype(np.float64) - xhat)
    # half-step bound, with float32 rounding slack
    assert (err <= s / (2 * qmax) * (1 + 1e-5) + 1e-30).all()
    # contraction
    assert np.linalg.norm(xhat - x.astype(np.float64)) <= np.linalg.norm(x.astype(np.float64)) * (1 + 1e-6)
    assert (err <= np.abs(x) * (1 + 1e-6) + 1e-30).all()


@given(vectors, st.sampled_from([4, 8]), st.integers(1, 40), st.integers(-8, 8))
def test_power_of_two_scale_covariance(x, k, G, e):
    # exact only while every value and quotient stays a normal float
    x = np.where(np.abs(x) < 1e-20, np.float32(0), x)
    a = np.float32(2.0**e)
    c1, c2 = quant.quantize(x, k, G), quant.quantize(x * a, k, G)
    np.testing.assert_array_equal(c1.codes(), c2.codes())
    np.testing.assert_array_equal(c1.scales * a, c2.scales)


@given(vectors, st.sampled_from([4, 8]), st.integers(1, 40))
def test_sign_odd(x, k, G):
    np.testing.assert_array_equal(quant.quantize(-x, k, G).codes(), -quant.quantize(x, k, G).codes())


@given(st.sampled_from([4, 8]), st.integers(1, 16), st.data())
def test_lattice_points_round_trip(k, G, data):
    qmax = 2 ** (k - 1) - 1
    ngroups = data.draw(st.integers(1, 4))
    codes = data.draw(hnp.arrays(np.int64, ngroups * G, elements=st.integers(-qmax, qmax)))
    codes.reshape(ngroups, G)[:, 0] = qmax  # pin each group's max so the scale is s
    s = np.float32(2.0 ** data.draw(st.integers(-4, 4)))
    x = (codes.astype(np.float32) * s / np.float32(qmax)).astype(np.float32)
    np.testing.assert_array_equal(quant.dequantize(quant.quantize(x, k, G)), x)


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        quant.quantize([1.0, np.nan], 4, 2)
    with pytest.raises(ValueError):
        quant.quantize([1.0], 3, 2)
    with pytest.raises(ValueError):
        quant.quantize([1.0], 4, 0)


def test_malformed_chunk_rejected():
    with pytest.raises(WireFormatError):
        QuantizedChunk(4, 4, 8, np.zeros(3, np.uint8), np.zeros(2, np.float32))
    with pytest.raises(WireFormatError):
        QuantizedChunk(4, 4, 8, np.zeros(4, np.uint8), np.zeros(3, np.float32))


def test_wire_round_trip_many():
    root = SeededRng(0)
    for i in range(1000):
        rng = root.spawn(i)
        n = int(rng.integers(0, 300, 1)[0])
        k = (4, 8)[i % 2]
        G = int(rng.integers(1, 80, 1)[0])
        c = quant.quantize(fill_gaussian(rng, n, 0.0, 3.0), k, G)
        buf = quant.wire_encode(c)
        assert len(buf) == quant.wire_size(n, k, G)
        assert quant.decode(buf) == c


def test_wire_sizes():
    c = quant.quantize(np.ones(4), 4, 4)
    assert c.packed.size == 2
    n, G = 131072, 2048
    c = quant.quantize(fill_gaussian(SeededRng(1), n), 4, G)
    assert c.payload_bytes == 65536 + 64 * 4 == 65792
    assert len(quant.wire_encode(c)) == 65792 + quant.HEADER_SIZE


def test_header_layout():
    c = quant.quantize(np.arange(5, dtype=np.float32), 8, 3)
    buf = quant.wire_encode(c)
    assert struct.unpack_from("<BIQ", buf) == (8, 3, 5)
    assert buf[13:18] == c.packed.tobytes()
    np.testing.assert_array_equal(np.frombuffer(buf[18:], "<f4"), c.scales)


def test_decode_errors():
    buf = quant.wire_encode(quant.quantize(np.arange(10, dtype=np.float32), 4, 4))
    with pytest.raises(WireFormatError, match="truncated header"):
        quant.decode(buf[:5])
    with pytest.raises(WireFormatError, match="truncated payload"):
        quant.decode(buf[:-1])
    with pytest.raises(WireFormatError, match="bit width"):
        quant.decode(bytes([5]) + buf[1:])
    with pytest.raises(WireFormatError, match="trailing"):
        quant.decode(buf + b"\x00")
    bad = bytearray(buf)
    bad[13] = 0x08  # code -8
    with pytest.raises(WireFormatError, match="-8"):
        quant.decode(bytes(bad))
    bad = bytearray(buf)
    bad[-4:] = struct.pack("<f", -1.0)
    with pytest.raises(WireFormatError, match="scales"):
        quant.decode(bytes(bad))


def test_chunk_stream():
    chunks = [quant.quantize(fill_gaussian(SeededRng(i), 10 + i), 4 + 4 * (i % 2), 4) for i in range(5)]
    buf = b"".join(quant.wire_encode(c) for c in chunks)
    assert quant.read_chunk_stream(buf) == chunks


def test_stochastic_rounding_uses_neighbours():
    x = np.array([0.3, 1.0], np.float32)
    q, s = quant.scaled_codes(np.tile(x, (2000, 1)), 7, 2, rng=SeededRng(0))
    assert set(np.unique(q[:, 0])) == {2.0, 3.0}
    assert (q[:, 1] == 7).all()
    assert abs(q[:, 0].mean() - 2.1) < 0.05
