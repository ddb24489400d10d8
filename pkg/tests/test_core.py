import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe2pc.core import (
    FixedPointCodec,
    RingTensor,
    as_ring,
    encode_int,
    encode_tensor,
    plain_matmul,
    to_signed,
    truncate,
)
from moe2pc.errors import ScaleError, ShapeError

F = 12
u64 = st.integers(min_value=0, max_value=2**64 - 1)


def test_encode_examples():
    assert encode_tensor([[0.0]], F).data.tolist() == [[0]]
    assert encode_tensor([[1.0]], F).data.tolist() == [[4096]]
    t = encode_tensor([[-0.5, 0.25]], F)
    assert t.data.tolist() == [[2**64 - 2048, 1024]]
    assert t.scale == F


def test_encode_overflow():
    with pytest.raises(OverflowError):
        encode_tensor([[2.0 ** (63 - F)]], F)
    encode_tensor([[2.0 ** (62 - F)]], F)


def test_plain_matmul_examples():
    eye = encode_tensor(np.eye(2), F)
    m = encode_tensor([[1.5, -2.0], [0.25, 3.0]], F)
    assert truncate(plain_matmul(eye, m)) == m
    p = plain_matmul(encode_tensor([[2.0]], F), encode_tensor([[3.0]], F))
    assert p.scale == 2 * F
    assert p == encode_tensor([[6.0]], 2 * F)


def test_plain_matmul_random_error():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-1, 1, (3, 3)), rng.uniform(-1, 1, (3, 3))
    got = truncate(plain_matmul(encode_tensor(a, F), encode_tensor(b, F))).decode()
    assert np.abs(got - a @ b).max() <= 3 * 2.0**-F


def test_plain_matmul_shape_error():
    with pytest.raises(ShapeError):
        plain_matmul(encode_tensor(np.zeros((2, 3))), encode_tensor(np.zeros((2, 3))))


def test_truncate_examples():
    assert truncate(encode_tensor([[1.0]], 2 * F)) == encode_tensor([[1.0]], F)
    got = truncate(encode_tensor([[0.75]], 2 * F)).signed()
    assert abs(int(got[0, 0]) - 3072) <= 1


def test_truncate_error_bound_many():
    rng = np.random.default_rng(7)
    r = rng.uniform(-1000, 1000, 100_000)
    t = truncate(encode_tensor(r, 2 * F))
    assert t.scale == F
    assert np.abs(t.decode() - r).max() <= 2.0**-F


def test_elementwise_requires_equal_scale_and_shape():
    a = encode_tensor([1.0, 2.0], F)
    with pytest.raises(ScaleError):
        a + encode_tensor([1.0, 2.0], F + 1)
    with pytest.raises(ShapeError):
        a + encode_tensor([1.0], F)


def test_wraparound():
    a = RingTensor(as_ring([2**64 - 1]), 0)
    assert (a + encode_int([1])).data.tolist() == [0]
    assert to_signed(as_ring([2**64 - 5])).tolist() == [-5]


@given(u64, u64, u64)
def test_ring_laws(x, y, z):
    a, b, c = (RingTensor(as_ring([v]), 0) for v in (x, y, z))
    assert (a + b) + c == a + (b + c)
    assert a + b == b + a
    assert (a * b) * c == a * (b * c)
    assert a * b == b * a
    assert (a * (b + c)).data[0] == ((x * y + x * z) % 2**64)


@given(st.integers(min_value=-(2**40), max_value=2**40), st.integers(min_value=0, max_value=20))
def test_decode_encode_identity_on_grid(k, f):
    codec = FixedPointCodec(f)
    r = k / 2**f
    assert codec.decode(codec.encode([r]))[0] == r


@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
def test_codec_rounding_bound(r):
    codec = FixedPointCodec(F)
    assert abs(codec.decode(codec.encode([r]))[0] - r) <= 2.0 ** (-F - 1)


@settings(max_examples=40)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32))
def test_plain_matmul_vs_triple_loop(m, p, q, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2**64, (m, p), dtype=np.uint64)
    b = rng.integers(0, 2**64, (p, q), dtype=np.uint64)
    got = plain_matmul(RingTensor(a, 0), RingTensor(b, 0)).data
    for i in range(m):
        for j in range(q):
            want = sum(int(a[i, r]) * int(b[r, j]) for r in range(p)) % 2**64
            assert int(got[i, j]) == want
