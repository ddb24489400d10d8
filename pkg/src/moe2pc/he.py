"""SIMD-slot ciphertext simulator and packed ciphertext-plaintext MatMul.

Slots hold ring values in the clear; what the simulator reproduces exactly is
the packing combinatorics: which slots hold what, and how many rotations,
plaintext multiplies and additions a layout costs.

All three schemes share one engine, the block-diagonal method.  The input
matrices are cut into *virtual columns* of ``w`` slots, ``B = N // w`` columns
per ciphertext.  Rotating a ciphertext left by ``s·w`` aligns input column
``(c + s) mod B`` with output block ``c``; multiplying by a plaintext of the
matching weights and summing over ``s`` yields ``B`` output columns at once,
for ``B − 1`` rotations per input ciphertext.

* ``bolt``:  one virtual column is one column of one expert (``w = t``);
  experts' columns are laid out back to back.
* ``batch``: one virtual column is the same column of all ``n`` experts
  stacked (``w = n·t``), so each ciphertext holds ``N/(n·t)`` columns.
* ``batch_bsgs``: the batch layout evaluated baby-step/giant-step.

Block widths are padded up to a power of two so that cyclic rotations keep
blocks aligned; padded slots stay zero and are dropped on unpack.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import RingTensor
from .errors import CapacityError, ShapeError

SCHEMES = ("bolt", "batch", "batch_bsgs", "bolt_bsgs")


@dataclass
class RotationCounter:
    rotations: int = 0
    pt_multiplies: int = 0
    ct_adds: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, rotations=0, pt_multiplies=0, ct_adds=0):
        with self._lock:
            self.rotations += rotations
            self.pt_multiplies += pt_multiplies
            self.ct_adds += ct_adds

    def reset(self):
        with self._lock:
            self.rotations = self.pt_multiplies = self.ct_adds = 0

    def as_dict(self) -> dict:
        return {"rotations": self.rotations, "pt_multiplies": self.pt_multiplies, "ct_adds": self.ct_adds}


class SlotVector:
    """An N-slot simulated ciphertext."""

    __slots__ = ("slots", "counter")

    def __init__(self, slots: np.ndarray, counter: RotationCounter):
        self.slots = np.asarray(slots, dtype=np.uint64)
        self.counter = counter

    @property
    def N(self) -> int:
        return self.slots.shape[0]

    def rot(self, s: int) -> "SlotVector":
        """Cyclic left shift by s; a shift of 0 (mod N) is free."""
        s %= self.N
        if s == 0:
            return self
        self.counter.add(rotations=1)
        return SlotVector(np.roll(self.slots, -s), self.counter)

    def __add__(self, other: "SlotVector") -> "SlotVector":
        self.counter.add(ct_adds=1)
        return SlotVector(self.slots + other.slots, self.counter)

    def mul_plain(self, plain: np.ndarray) -> "SlotVector":
        self.counter.add(pt_multiplies=1)
        return SlotVector(self.slots * plain, self.counter)


def rot_plain(plain: np.ndarray, s: int) -> np.ndarray:
    """Rotate a plaintext vector; free, it never touches a ciphertext."""
    return np.roll(plain, -s)


def pow2_ceil(x: int) -> int:
    return 1 << max(0, (int(x) - 1).bit_length())


@dataclass(frozen=True)
class PackingLayout:
    scheme: str
    n: int
    t: int
    d1: int
    d2: int
    N: int

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown packing scheme {self.scheme!r}")
        if self.N & (self.N - 1) or self.N <= 0:
            raise ValueError(f"slot count must be a power of two, got {self.N}")
        if min(self.n, self.t, self.d1, self.d2) < 1:
            raise ShapeError("all layout dimensions must be positive")
        if self.column_height > self.N:
            what = "n·t" if self.batched else "t"
            raise CapacityError(f"{what}={self.column_height} exceeds N={self.N} slots")

    @property
    def batched(self) -> bool:
        return self.scheme.startswith("batch")

    @property
    def column_height(self) -> int:
        return self.n * self.t if self.batched else self.t

    @property
    def width(self) -> int:
        """Slots per virtual column after padding."""
        return pow2_ceil(self.column_height)

    @property
    def blocks(self) -> int:
        return self.N // self.width

    @property
    def in_columns(self) -> int:
        return self.d1 if self.batched else self.n * self.d1

    @property
    def out_columns(self) -> int:
        return self.d2 if self.batched else self.n * self.d2

    @property
    def in_cts(self) -> int:
        return -(-self.in_columns // self.blocks)

    @property
    def out_cts(self) -> int:
        return -(-self.out_columns // self.blocks)


def bsgs_cost(in_cts: int, out_cts: int, blocks: int, baby: int) -> int:
    giant = -(-blocks // baby)
    return in_cts * (baby - 1) + out_cts * (giant - 1)


def default_baby_steps(in_cts: int, out_cts: int, blocks: int) -> int:
    """Baby-step count minimising total rotations (smallest on ties)."""
    return min(range(1, blocks + 1), key=lambda b: (bsgs_cost(in_cts, out_cts, blocks, b), b))


# --------------------------------------------------------------------------
# engine


def _check_inputs(a_list, b_list):
    if len(a_list) != len(b_list) or not a_list:
        raise ShapeError("need one weight matrix per input matrix")
    t, d1 = a_list[0].shape
    d2 = b_list[0].shape[1]
    for a, b in zip(a_list, b_list):
        if a.shape != (t, d1) or b.shape != (d1, d2):
            raise ShapeError(f"inconsistent shapes {a.shape} x {b.shape}; expected ({t},{d1}) x ({d1},{d2})")
    return t, d1, d2


class _Packer:
    """Maps matrices to virtual columns and weights to plaintext diagonals."""

    def __init__(self, layout: PackingLayout, a_list, b_list):
        self.L = layout
        self.A = np.stack([np.asarray(a, dtype=np.uint64) for a in a_list])  # n, t, d1
        self.W = np.stack([np.asarray(b, dtype=np.uint64) for b in b_list])  # n, d1, d2

    def input_columns(self) -> np.ndarray:
        L = self.L
        n, t, d1 = self.A.shape
        cols = np.zeros((L.in_cts * L.blocks, L.width), dtype=np.uint64)
        if L.batched:
            # column c = [A_0[:, c], A_1[:, c], ...]
            cols[:d1, : n * t] = self.A.transpose(2, 0, 1).reshape(d1, n * t)
        else:
            cols[: n * d1, :t] = self.A.transpose(0, 2, 1).reshape(n * d1, t)
        return cols

    def encrypt(self, counter: RotationCounter) -> list[SlotVector]:
        cols = self.input_columns()
        per = self.L.blocks * self.L.width
        return [SlotVector(cols.reshape(-1)[u * per:(u + 1) * per], counter) for u in range(self.L.in_cts)]

    def diagonal(self, u: int, s: int, g: int) -> np.ndarray:
        """Plaintext multiplying rot(ct_u, s·w) on its way into output ct g."""
        L = self.L
        n, t, d1 = self.A.shape
        d2 = self.W.shape[2]
        B, w = L.blocks, L.width
        c = np.arange(B)
        q_in = u * B + (c + s) % B
        q_out = g * B + c
        out = np.zeros((B, w), dtype=np.uint64)
        if L.batched:
            ok = (q_in < d1) & (q_out < d2)
            vals = self.W[:, q_in[ok], q_out[ok]]  # n, #ok
            out[ok, : n * t] = np.repeat(vals.T, t, axis=1)
        else:
            e_in, e_out = q_in // d1, q_out // d2
            ok = (q_in < n * d1) & (q_out < n * d2) & (e_in == e_out)
            vals = self.W[e_in[ok], q_in[ok] % d1, q_out[ok] % d2]
            out[ok, :t] = vals[:, None]
        return out.reshape(-1)

    def decrypt(self, out_cts: list[SlotVector]) -> list[np.ndarray]:
        L = self.L
        n, t, _ = self.A.shape
        d2 = self.W.shape[2]
        cols = np.concatenate([ct.slots for ct in out_cts]).reshape(-1, L.width)
        if L.batched:
            blk = cols[:d2, : n * t].reshape(d2, n, t)
            return [np.ascontiguousarray(blk[:, e, :].T) for e in range(n)]
        blk = cols[: n * d2, :t].reshape(n, d2, t)
        return [np.ascontiguousarray(blk[e].T) for e in range(n)]


def _accumulate(acc, term):
    return term if acc is None else acc + term


def _run_diagonal(packer: _Packer, cts: list[SlotVector], counter: RotationCounter) -> list[SlotVector]:
    L = packer.L
    rotated = [[ct.rot(s * L.width) for s in range(L.blocks)] for ct in cts]
    outs = []
    for g in range(L.out_cts):
        acc = None
        for u, rots in enumerate(rotated):
            for s, r in enumerate(rots):
                acc = _accumulate(acc, r.mul_plain(packer.diagonal(u, s, g)))
        outs.append(acc)
    return outs


def _run_bsgs(packer: _Packer, cts: list[SlotVector], counter: RotationCounter, baby: int) -> list[SlotVector]:
    L = packer.L
    B, w = L.blocks, L.width
    giant = -(-B // baby)
    babies = [[ct.rot(b * w) for b in range(baby)] for ct in cts]
    outs = []
    for g in range(L.out_cts):
        acc = None
        for gi in range(giant):
            shift = gi * baby * w
            inner = None
            for u, rots in enumerate(babies):
                for b, r in enumerate(rots):
                    s = gi * baby + b
                    if s >= B:
                        break
                    inner = _accumulate(inner, r.mul_plain(rot_plain(packer.diagonal(u, s, g), -shift)))
            acc = _accumulate(acc, inner.rot(shift))
        outs.append(acc)
    return outs


def packed_matmul(
    scheme: str,
    a_list: Sequence,
    b_list: Sequence,
    N: int,
    counter: RotationCounter | None = None,
    baby_steps: int | None = None,
) -> tuple[list[np.ndarray], RotationCounter, PackingLayout]:
    """Compute A_i·B_i for every i through the chosen packing.

    ``a_list`` are the (client-side) ring matrices t×d1, ``b_list`` the
    plaintext weights d1×d2.  Returns raw ring products, the counter and the
    layout used.  ``bolt_bsgs`` runs BSGS independently for each expert.
    """
    counter = counter if counter is not None else RotationCounter()
    a_list = [a.data if isinstance(a, RingTensor) else np.asarray(a, dtype=np.uint64) for a in a_list]
    b_list = [b.data if isinstance(b, RingTensor) else np.asarray(b, dtype=np.uint64) for b in b_list]
    t, d1, d2 = _check_inputs(a_list, b_list)
    n = len(a_list)
    if scheme == "bolt_bsgs":
        results = []
        for a, b in zip(a_list, b_list):
            res, _, _ = packed_matmul("batch_bsgs", [a], [b], N, counter, baby_steps)
            results += res
        return results, counter, PackingLayout("bolt_bsgs", n, t, d1, d2, N)
    layout = PackingLayout(scheme, n, t, d1, d2, N)
    packer = _Packer(layout, a_list, b_list)
    cts = packer.encrypt(counter)
    if scheme == "batch_bsgs":
        baby = baby_steps or default_baby_steps(layout.in_cts, layout.out_cts, layout.blocks)
        if not 1 <= baby <= layout.blocks:
            raise ValueError(f"baby steps must lie in [1, {layout.blocks}]")
        outs = _run_bsgs(packer, cts, counter, baby)
    else:
        outs = _run_diagonal(packer, cts, counter)
    return packer.decrypt(outs), counter, layout


def _wrap(results, scale):
    return [RingTensor(r, scale) for r in results]


def matmul_bolt(a_list, b_list, N: int, counter: RotationCounter | None = None):
    """Column-wise packing along the token dimension, experts back to back."""
    res, counter, _ = packed_matmul("bolt", a_list, b_list, N, counter)
    return _wrap(res, _scale(a_list, b_list)), counter


def matmul_batch(a_list, b_list, N: int, counter: RotationCounter | None = None):
    """Columns of all experts stacked into one nt-slot block."""
    res, counter, _ = packed_matmul("batch", a_list, b_list, N, counter)
    return _wrap(res, _scale(a_list, b_list)), counter


def matmul_batch_bsgs(a_list, b_list, N: int, baby_steps: int | None = None, counter: RotationCounter | None = None):
    res, counter, _ = packed_matmul("batch_bsgs", a_list, b_list, N, counter, baby_steps)
    return _wrap(res, _scale(a_list, b_list)), counter


def matmul_bolt_bsgs(a_list, b_list, N: int, baby_steps: int | None = None, counter: RotationCounter | None = None):
    """BSGS applied independently to each expert's product."""
    res, counter, _ = packed_matmul("bolt_bsgs", a_list, b_list, N, counter, baby_steps)
    return _wrap(res, _scale(a_list, b_list)), counter


def _scale(a_list, b_list) -> int:
    sa = a_list[0].scale if isinstance(a_list[0], RingTensor) else 0
    sb = b_list[0].scale if isinstance(b_list[0], RingTensor) else 0
    return sa + sb


def ciphertext_counts(scheme: str, n: int, t: int, d1: int, d2: int, N: int) -> tuple[int, int]:
    """(input ciphertexts, output ciphertexts) a layout sends over the wire."""
    if scheme == "bolt_bsgs":
        one = PackingLayout("batch_bsgs", 1, t, d1, d2, N)
        return n * one.in_cts, n * one.out_cts
    layout = PackingLayout(scheme, n, t, d1, d2, N)
    return layout.in_cts, layout.out_cts


def sqrt_bound(n: int, t: int, d1: int, d2: int, N: int) -> float:
    return math.sqrt(n * t * d1 * d2 / N)
