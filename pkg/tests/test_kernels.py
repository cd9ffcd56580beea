"""The numpy and numba flavour of every kernel must agree bit for bit."""

import numpy as np
import pytest

from qmoe.kernels import HAVE_NUMBA, IMPLEMENTATIONS

pytestmark = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not importable")


def both(name):
    impl = IMPLEMENTATIONS[name]
    return impl["numpy"], impl["numba"]


def test_matmul_flavours_identical(nprng):
    f_np, f_nb = both("matmul")
    for shape in [(1, 1, 1), (3, 7, 5), (17, 64, 9)]:
        n, k, m = shape
        a = nprng.standard_normal((n, k)).astype(np.float32)
        b = nprng.standard_normal((k, m)).astype(np.float32)
        assert f_np(a, b).tobytes() == f_nb(a, b).tobytes()


@pytest.mark.parametrize("bits", [1, 2, 4, 8, 16])
def test_pack_unpack_flavours_identical(bits, nprng):
    p_np, p_nb = both("pack_stream")
    u_np, u_nb = both("unpack_stream")
    for n in (1, 7, 8, 9, 63, 257):
        codes = nprng.integers(0, 1 << bits, n).astype(np.uint32)
        a, b = p_np(codes, bits), p_nb(codes, bits)
        assert a.tobytes() == b.tobytes()
        assert np.array_equal(u_np(a, bits, n), u_nb(a, bits, n))


def test_pack_rows_and_popcount_identical(nprng):
    r_np, r_nb = both("pack_rows")
    x_np, x_nb = both("xor_popcount")
    for d in (7, 64, 65, 130):
        bits = (nprng.random((5, d)) > 0.5).astype(np.uint8)
        w = (nprng.random((4, d)) > 0.5).astype(np.uint8)
        assert np.array_equal(r_np(bits), r_nb(bits))
        xa, wa = r_np(bits), r_np(w)
        assert np.array_equal(x_np(xa, wa), x_nb(xa, wa))


def test_bitlinear_round_identical_including_halves():
    f_np, f_nb = both("bitlinear_round")
    w = np.array([1.27, -1.27, 0.635, 0.0, -0.635, 0.005, -0.005], dtype=np.float32)
    mean = float(np.mean(w, dtype=np.float64))
    assert np.array_equal(f_np(w, mean, 127.0, 1.27), f_nb(w, mean, 127.0, 1.27))


def test_adam_identical(nprng):
    f_np, f_nb = both("adam")
    p = nprng.standard_normal(50).astype(np.float32)
    g = nprng.standard_normal(50).astype(np.float32)
    outs = []
    for f in (f_np, f_nb):
        pp, m, v = p.copy(), np.zeros(50, np.float32), np.zeros(50, np.float32)
        for _ in range(3):
            f(pp, g, m, v, *map(np.float32, (1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8, 0.999)))
        outs.append(pp)
    assert outs[0].tobytes() == outs[1].tobytes()
