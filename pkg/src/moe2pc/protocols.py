"""Secure primitives on shares: equality, mux, mul, top-k, one-hot, softmax.

Equality, comparison, softmax, SiLU and public division are ideal
functionalities (evaluated in a sealed oracle and re-shared), metered through
the session cost model.  Mux and mul are real Beaver exchanges.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import FixedPointCodec, RingTensor, to_signed
from .errors import BoundsError, ScaleError, ShapeError
from .shares import Session, Shared, beaver_mul

# A BoolShareTensor is a Shared at scale 0 whose reconstruction is 0/1.
BoolShareTensor = Shared


@dataclass(frozen=True)
class TopKResult:
    values: Shared
    indices: Shared


def _require_int(x: Shared, what: str):
    if x.scale != 0:
        raise ScaleError(f"{what} expects integer-scaled shares, got scale {x.scale}")


def pi_equal(session: Session, x: Shared, c) -> BoolShareTensor:
    """⟦1{x == c}⟧ against a public constant (scalar or broadcastable array)."""
    _require_int(x, "pi_equal")
    const = np.asarray(c, dtype=np.int64).view(np.uint64)
    shape = np.broadcast_shapes(x.shape, const.shape)
    if shape != x.shape:
        x = x.local(lambda a: np.ascontiguousarray(np.broadcast_to(a, shape)))
    return session.ideal("equal", [x], lambda v: (v.data == const).astype(np.uint64), 0)


def pi_mux(session: Session, b: BoolShareTensor, x: Shared, label: str = "mux") -> Shared:
    """⟦b·x⟧ for boolean ⟦b⟧; the scale of x is preserved."""
    _require_int(b, "pi_mux selector")
    try:
        np.broadcast_shapes(b.shape, x.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {b.shape} with {x.shape}") from None
    return beaver_mul(session, b, x, label=label, primitive="mux")


def pi_mul(session: Session, a: Shared, b: Shared, label: str = "mul") -> Shared:
    """Elementwise share product; scales add."""
    return beaver_mul(session, a, b, label=label, primitive="mul")


# --------------------------------------------------------------------------
# sorting network


@lru_cache(maxsize=None)
def oddeven_merge_layers(length: int) -> tuple[tuple[tuple[int, int], ...], ...]:
    """Batcher's odd-even merge sort, grouped into layers of disjoint comparators.

    For lengths that are not powers of two this is the power-of-two network
    with every comparator touching a position >= length removed.  Each pair
    (i, j) has i < j and moves the better record to i.
    """
    layers = []
    p = 1
    while p < length:
        k = p
        while k >= 1:
            layer = []
            j = k % p
            while j + k < length:
                for i in range(min(k, length - j - k)):
                    if (i + j) // (2 * p) == (i + j + k) // (2 * p):
                        layer.append((i + j, i + j + k))
                j += 2 * k
            if layer:
                layers.append(tuple(layer))
            k //= 2
        p *= 2
    return tuple(layers)


def comparator_count(length: int) -> int:
    return sum(len(layer) for layer in oddeven_merge_layers(length))


def _better(sa, ia, sb, ib) -> np.ndarray:
    """1 where record b must move ahead of record a (higher score, then lower index)."""
    return ((sb > sa) | ((sb == sa) & (ib < ia))).astype(np.uint64)


def compare_exchange(
    session: Session,
    scores: list[np.ndarray],
    index: list[np.ndarray],
    payload: list[np.ndarray] | None,
    pairs,
):
    """One layer of oblivious compare-exchange, applied in place.

    ``scores``/``index`` are [half0, half1] arrays of shape (R, L);
    ``payload`` (optional) is [half0, half1] of shape (R, L, d) and is swapped
    along with the records.  Costs one metered comparison per pair and one
    Beaver mux over every swapped element.
    """
    a = np.fromiter((p[0] for p in pairs), dtype=np.intp)
    b = np.fromiter((p[1] for p in pairs), dtype=np.intp)
    rows, tag = scores[0].shape[0], session.tag

    def cut(h, cols):
        return Shared.from_arrays(h[0][:, cols], h[1][:, cols], 0, tag)

    sa, sb, ia, ib = cut(scores, a), cut(scores, b), cut(index, a), cut(index, b)
    bit = session.ideal(
        "topk-compareswap",
        [sa, ia, sb, ib],
        lambda sa_, ia_, sb_, ib_: _better(sa_.signed(), ia_.signed(), sb_.signed(), ib_.signed()),
        0,
    )
    session.counters["compare_exchange"] += rows * len(pairs)

    # swap: delta = bit * (rec_b - rec_a); rec_a += delta; rec_b -= delta
    diffs0 = [scores[0][:, b] - scores[0][:, a], index[0][:, b] - index[0][:, a]]
    diffs1 = [scores[1][:, b] - scores[1][:, a], index[1][:, b] - index[1][:, a]]
    width = 2
    if payload is not None:
        d = payload[0].shape[2]
        diffs0 += [(payload[0][:, b] - payload[0][:, a]).transpose(2, 0, 1).reshape(d * rows, -1)]
        diffs1 += [(payload[1][:, b] - payload[1][:, a]).transpose(2, 0, 1).reshape(d * rows, -1)]
        width += d
    diff = Shared.from_arrays(np.concatenate(diffs0, 0), np.concatenate(diffs1, 0), 0, tag)
    sel = bit.local(lambda h: np.tile(h, (width, 1)))
    delta = pi_mux(session, sel, diff, label="swap")
    halves = (delta.a0, delta.a1)
    for h in (0, 1):
        dl = halves[h]
        ds, di = dl[:rows], dl[rows:2 * rows]
        scores[h][:, a] += ds
        scores[h][:, b] -= ds
        index[h][:, a] += di
        index[h][:, b] -= di
        if payload is not None:
            dp = dl[2 * rows:].reshape(d, rows, -1).transpose(1, 2, 0)
            payload[h][:, a] += dp
            payload[h][:, b] -= dp


def pi_topk(session: Session, s: Shared, t: int) -> TopKResult:
    """Top-t of each row of ⟦s⟧ via an odd-even merge sorting network.

    Accepts shape (L,) or (R, L); rows are sorted independently and share
    each layer's communication.  Values come back in non-increasing order
    with ties broken toward the smaller input position.
    """
    single = len(s.shape) == 1
    scores = s.reshape(1, -1) if single else s
    rows, length = scores.shape
    if not 1 <= t <= length:
        raise BoundsError(f"top-k needs 1 <= t <= {length}, got t={t}")
    sc = [scores.a0.copy(), scores.a1.copy()]
    idx = [np.tile(np.arange(length, dtype=np.uint64), (rows, 1)), np.zeros((rows, length), dtype=np.uint64)]
    for layer in oddeven_merge_layers(length):
        compare_exchange(session, sc, idx, None, layer)
    values = Shared.from_arrays(sc[0][:, :t], sc[1][:, :t], scores.scale, s.tag)
    indices = Shared.from_arrays(idx[0][:, :t], idx[1][:, :t], 0, s.tag)
    if single:
        values, indices = values.reshape(t), indices.reshape(t)
    return TopKResult(values, indices)


def pi_onehot(session: Session, idx: Shared, c: int) -> BoolShareTensor:
    """Row i is the one-hot encoding of idx[i] over width c (t·c equality tests).

    Out-of-range indices give an all-zero row; with ``session.debug`` they
    raise BoundsError instead.
    """
    _require_int(idx, "pi_onehot")
    if session.debug:
        opened = session.reconstruct(idx).signed()
        if np.any((opened < 0) | (opened >= c)):
            raise BoundsError(f"one-hot index out of range [0, {c})")
    wide = idx.local(lambda a: np.ascontiguousarray(np.repeat(a[..., None], c, axis=-1)))
    return pi_equal(session, wide, np.arange(c))


def pi_softmax(session: Session, x: Shared) -> Shared:
    """Row-wise softmax of fixed-point logits."""
    f = x.scale
    codec = FixedPointCodec(f)

    def fn(v: RingTensor):
        z = codec.decode(v.data)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return codec.encode(e / e.sum(axis=-1, keepdims=True))

    return session.ideal("softmax", [x], fn, f)


def pi_silu(session: Session, x: Shared) -> Shared:
    """Elementwise SiLU(x) = x·sigmoid(x) of fixed-point values."""
    f = x.scale
    codec = FixedPointCodec(f)

    def fn(v: RingTensor):
        z = codec.decode(v.data)
        return codec.encode(z / (1.0 + np.exp(-z)))

    return session.ideal("silu", [x], fn, f)


def pi_divpub(session: Session, x: Shared, k: int) -> Shared:
    """⟦floor(x / k)⟧ for a public positive integer k."""
    _require_int(x, "pi_divpub")
    if k <= 0:
        raise ValueError("divisor must be positive")
    return session.ideal("divpub", [x], lambda v: np.floor_divide(to_signed(v.data), k).view(np.uint64), 0)
