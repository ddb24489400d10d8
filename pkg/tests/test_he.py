import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe2pc import oracle
from moe2pc.core import RingTensor, plain_matmul, ring_matmul
from moe2pc.errors import CapacityError
from moe2pc.he import (
    SCHEMES,
    PackingLayout,
    RotationCounter,
    SlotVector,
    matmul_batch,
    matmul_batch_bsgs,
    matmul_bolt,
    packed_matmul,
)


def rand_mats(rng, n, t, d1, d2):
    a = [rng.integers(0, 2**64, (t, d1), dtype=np.uint64) for _ in range(n)]
    b = [rng.integers(0, 2**64, (d1, d2), dtype=np.uint64) for _ in range(n)]
    return a, b


def rotations(scheme, n, t, d1, d2, N, seed=0, **kw):
    a, b = rand_mats(np.random.default_rng(seed), n, t, d1, d2)
    res, counter, _ = packed_matmul(scheme, a, b, N, **kw)
    for x, w, r in zip(a, b, res):
        assert np.array_equal(ring_matmul(x, w), r)
    return counter.rotations


def test_slot_vector_rotation():
    c = RotationCounter()
    v = SlotVector(np.arange(8, dtype=np.uint64), c)
    assert v.rot(3).slots.tolist() == [3, 4, 5, 6, 7, 0, 1, 2]
    assert c.rotations == 1
    v.rot(8)
    v.rot(0)
    assert c.rotations == 1
    (v + v).mul_plain(np.full(8, 2, dtype=np.uint64))
    assert (c.ct_adds, c.pt_multiplies) == (1, 1)


def test_two_expert_toy_counts():
    assert rotations("bolt", 2, 2, 4, 4, 8) == 6
    assert rotations("batch", 2, 2, 4, 4, 8) == 2


def test_wrappers_return_ring_tensors():
    rng = np.random.default_rng(0)
    a = [RingTensor(rng.integers(0, 2**64, (2, 4), dtype=np.uint64), 12) for _ in range(2)]
    b = [RingTensor(rng.integers(0, 2**64, (4, 4), dtype=np.uint64), 12) for _ in range(2)]
    for fn in (matmul_bolt, matmul_batch, matmul_batch_bsgs):
        out, counter = fn(a, b, 8)
        for x, w, r in zip(a, b, out):
            assert r == plain_matmul(x, w) and r.scale == 24


def test_degenerate_cases():
    assert rotations("bolt", 1, 16, 1, 3, 16) == 0
    for d1 in (1, 5, 12):
        assert rotations("batch", 4, 4, d1, 3, 16) == 0


def test_derived_counts():
    assert rotations("bolt", 4, 2, 8, 8, 16) == 28
    assert rotations("batch", 4, 2, 8, 8, 16) == 4


def test_capacity_error():
    with pytest.raises(CapacityError):
        PackingLayout("batch", 4, 4, 8, 8, 8)
    with pytest.raises(CapacityError):
        rotations("bolt", 1, 16, 2, 2, 8)


def test_bsgs_degenerate_matches_batch():
    # one block per ciphertext: no baby or giant steps to take
    assert rotations("batch_bsgs", 2, 4, 6, 6, 8) == rotations("batch", 2, 4, 6, 6, 8) == 0
    # baby = 1 reduces BSGS to output-side diagonal accumulation
    assert rotations("batch_bsgs", 2, 2, 4, 4, 8, baby_steps=1) == oracle.rotation_count("batch_bsgs", 2, 2, 4, 4, 8, baby=1)


def test_bsgs_growth_in_n_is_sqrt():
    # batched BSGS grows like sqrt(n): n=16 over n=1 near 4
    one = rotations("batch_bsgs", 1, 2, 512, 512, 1024)
    many = rotations("batch_bsgs", 16, 2, 512, 512, 1024)
    assert abs(many / one - 4) <= 0.2 * 4


def test_counter_thread_safe():
    counter = RotationCounter()
    rng = np.random.default_rng(1)
    a, b = rand_mats(rng, 2, 2, 4, 4)

    def work():
        for _ in range(20):
            packed_matmul("bolt", a, b, 8, counter)

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert counter.rotations == 4 * 20 * 6


pow2 = st.sampled_from([8, 16, 32, 64, 128, 256])


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(SCHEMES), st.integers(1, 8), st.integers(1, 8), st.integers(1, 32), st.integers(1, 32), pow2,
       st.integers(0, 2**32))
def test_packing_exact_and_counter_identity(scheme, n, t, d1, d2, N, seed):
    try:
        got = rotations(scheme, n, t, d1, d2, N, seed)
    except CapacityError:
        height = n * t if scheme.startswith("batch") else t
        assert oracle._pow2_at_least(height) > N
        return
    assert got == oracle.rotation_count(scheme, n, t, d1, d2, N)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(1, 8), st.integers(1, 32), pow2)
def test_batch_never_worse_than_bolt(n, t, d1, N):
    if oracle._pow2_at_least(n * t) > N:
        return
    assert oracle.rotation_count("batch", n, t, d1, 4, N) <= oracle.rotation_count("bolt", n, t, d1, 4, N)


def test_batch_advantage_at_largest_point():
    n, t, d1, N = 8, 2, 32, 128
    ratio = rotations("bolt", n, t, d1, 4, N) / rotations("batch", n, t, d1, 4, N)
    assert ratio >= 0.8 * n
