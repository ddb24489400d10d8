"""Two-party additive secret sharing over Z_{2^64}.

A :class:`Session` bundles everything one protocol run needs: the trusted
dealer that hands out correlated randomness, the duplex channel the two
parties talk over, the cost model used to meter ideal functionalities, and
the :class:`Transcript` that records every message.  Both parties are
simulated in lockstep inside the session; every byte that would cross the
wire is framed and pushed through the channel so the transcript reflects real
payload sizes.
"""

from __future__ import annotations

import contextlib
import enum
import json
import queue
import socket
import struct
import threading
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .core import DEFAULT_FRAC_BITS, FixedPointCodec, RingTensor, ring_matmul, to_signed
from .errors import (
    ConfigError,
    PolicyError,
    ScaleError,
    SessionClosedError,
    ShapeError,
    TripleExhaustedError,
)
from .jsonio import fail, read_json

_ZERO = np.uint64(0)


class PartyId(enum.IntEnum):
    P0 = 0  # client
    P1 = 1  # server

    @property
    def other(self) -> "PartyId":
        return PartyId(1 - int(self))


# --------------------------------------------------------------------------
# transcript & cost model

class TranscriptEntry(NamedTuple):
    round: int
    sender: PartyId
    label: str
    byte_length: int


class Transcript:
    """Append-only message log."""

    def __init__(self):
        self._entries: list[TranscriptEntry] = []
        self._lock = threading.Lock()

    def append(self, round_: int, sender: PartyId, label: str, byte_length: int):
        with self._lock:
            self._entries.append(TranscriptEntry(round_, PartyId(sender), label, int(byte_length)))

    @property
    def entries(self) -> tuple[TranscriptEntry, ...]:
        return tuple(self._entries)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self.entries)

    def shape(self) -> list[tuple[int, int, str, int]]:
        """(round, sender, label, byteLength) tuples; the privacy-relevant view."""
        return [(e.round, int(e.sender), e.label, e.byte_length) for e in self._entries]

    def total_bytes(self, prefix: str | None = None, exclude: Sequence[str] = ()) -> int:
        """Sum of byte lengths, optionally restricted to a label prefix and
        skipping labels that contain any of ``exclude``."""
        total = 0
        for e in self._entries:
            if prefix is not None and not e.label.startswith(prefix):
                continue
            if any(x in e.label for x in exclude):
                continue
            total += e.byte_length
        return total

    def rounds(self) -> int:
        return max((e.round for e in self._entries), default=-1) + 1


@dataclass(frozen=True)
class CostEntry:
    bytes_per_element: int
    rounds: int


COST_LABELS = ("equal", "mux", "mul", "topk-compareswap", "softmax", "silu", "divpub", "he-matmul-ct")


class CostModel:
    """Per-primitive (bytes per element, rounds) table."""

    def __init__(self, table: dict[str, CostEntry]):
        for label, entry in table.items():
            if entry.bytes_per_element < 0 or entry.rounds < 0:
                raise ConfigError("cost entries must be non-negative", field=label)
        self.table = dict(table)

    def __getitem__(self, label: str) -> CostEntry:
        try:
            return self.table[label]
        except KeyError:
            raise ConfigError(f"cost model has no entry for '{label}'", field=label) from None

    @classmethod
    def from_dict(cls, obj: dict, text: str | None = None) -> "CostModel":
        table = {}
        for label, raw in obj.items():
            if label.startswith("_"):
                continue
            if not isinstance(raw, dict):
                fail(text, label, "expected an object with bytes_per_element and rounds")
            try:
                bpe, rounds = raw["bytes_per_element"], raw["rounds"]
            except KeyError as exc:
                fail(text, label, f"missing key {exc.args[0]!r}", path=f"{label}.{exc.args[0]}")
            if not (isinstance(bpe, int) and isinstance(rounds, int)) or bpe < 0 or rounds < 0:
                fail(text, label, "bytes_per_element and rounds must be non-negative integers")
            table[label] = CostEntry(bpe, rounds)
        missing = [lab for lab in COST_LABELS if lab not in table]
        if missing:
            raise ConfigError(f"cost model lacks entries: {', '.join(missing)}")
        return cls(table)

    @classmethod
    def load(cls, path) -> "CostModel":
        obj, text = read_json(path)
        return cls.from_dict(obj, text)

    @classmethod
    def default(cls) -> "CostModel":
        text = resources.files("moe2pc.data").joinpath("costmodel.default.json").read_text()
        return cls.from_dict(json.loads(text), text)

    def to_dict(self) -> dict:
        return {k: {"bytes_per_element": v.bytes_per_element, "rounds": v.rounds} for k, v in self.table.items()}


# --------------------------------------------------------------------------
# framing & channels

_LEN = struct.Struct(">I")
_HDR = struct.Struct(">BHB")  # sender, label length, ndim


def encode_frame(sender: PartyId, label: str, array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype=np.uint64)
    lab = label.encode()
    body = _HDR.pack(int(sender), len(lab), arr.ndim) + lab
    body += struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(">u8").tobytes()
    return _LEN.pack(len(body)) + body


def decode_frame(frame: bytes) -> tuple[PartyId, str, np.ndarray]:
    (length,) = _LEN.unpack_from(frame, 0)
    body = frame[_LEN.size:_LEN.size + length]
    sender, lab_len, ndim = _HDR.unpack_from(body, 0)
    off = _HDR.size
    label = body[off:off + lab_len].decode()
    off += lab_len
    shape = struct.unpack_from(f">{ndim}I", body, off)
    off += 4 * ndim
    arr = np.frombuffer(body[off:], dtype=">u8").astype(np.uint64).reshape(shape)
    return PartyId(sender), label, arr


class DuplexChannel:
    """In-process channel: one inbox queue per party."""

    def __init__(self):
        self._inbox = {PartyId.P0: queue.Queue(), PartyId.P1: queue.Queue()}

    def send(self, sender: PartyId, frame: bytes):
        self._inbox[PartyId(sender).other].put(frame)

    def recv(self, receiver: PartyId, timeout: float | None = 10.0) -> bytes:
        return self._inbox[PartyId(receiver)].get(timeout=timeout)

    def close(self):
        pass


class SocketChannel(DuplexChannel):
    """Same framing over a loopback socket pair; a reader thread per end drains frames."""

    def __init__(self):
        super().__init__()
        a, b = socket.socketpair()
        self._socks = {PartyId.P0: a, PartyId.P1: b}
        self._readers = [
            threading.Thread(target=self._pump, args=(party,), daemon=True) for party in PartyId
        ]
        for t in self._readers:
            t.start()

    def _read_exact(self, sock, n):
        buf = bytearray()
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return bytes(buf)

    def _pump(self, party: PartyId):
        sock = self._socks[party]
        while True:
            head = self._read_exact(sock, _LEN.size)
            if head is None:
                return
            body = self._read_exact(sock, _LEN.unpack(head)[0])
            if body is None:
                return
            self._inbox[party].put(head + body)

    def send(self, sender: PartyId, frame: bytes):
        self._socks[PartyId(sender)].sendall(frame)

    def close(self):
        for s in self._socks.values():
            with contextlib.suppress(OSError):
                s.shutdown(socket.SHUT_RDWR)
            s.close()


# --------------------------------------------------------------------------
# dealer

class Dealer:
    """Trusted dealer for correlated randomness, seeded for reproducibility.

    Triples are generated on demand for the requested shape; ``pool_cap``
    bounds how many may be issued in one session.
    """

    def __init__(self, seed: int = 0, pool_cap: int | None = None):
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0xD1])))
        self.pool_cap = pool_cap
        self.issued = 0

    def random(self, shape) -> np.ndarray:
        shape = tuple(shape)
        size = int(np.prod(shape, dtype=np.int64))
        return self._rng.bit_generator.random_raw(size).astype(np.uint64).reshape(shape)

    def split(self, value: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r = self.random(np.shape(value))
        return value - r, r

    def _take(self):
        if self.pool_cap is not None and self.issued >= self.pool_cap:
            raise TripleExhaustedError(f"dealer pool exhausted after {self.issued} triples")
        self.issued += 1

    def matmul_triple(self, m: int, p: int, q: int):
        self._take()
        u, v = self.random((m, p)), self.random((p, q))
        z = ring_matmul(u, v)
        (u0, u1), (v0, v1), (z0, z1) = self.split(u), self.split(v), self.split(z)
        return (u0, v0, z0), (u1, v1, z1)

    def mul_triple(self, shape):
        self._take()
        u, v = self.random(shape), self.random(shape)
        (u0, u1), (v0, v1), (z0, z1) = self.split(u), self.split(v), self.split(u * v)
        return (u0, v0, z0), (u1, v1, z1)


# --------------------------------------------------------------------------
# share containers

@dataclass(frozen=True, eq=False)
class ShareTensor:
    owner: PartyId
    payload: RingTensor
    session_tag: str


@dataclass(frozen=True, eq=False)
class Shared:
    """Both halves of ⟦x⟧ as seen by the session harness.

    Local (communication-free) algebra lives here; anything that needs a
    message goes through the session.
    """

    s0: ShareTensor
    s1: ShareTensor

    @classmethod
    def from_arrays(cls, a0, a1, scale: int, tag: str) -> "Shared":
        return cls(
            ShareTensor(PartyId.P0, RingTensor(a0, scale), tag),
            ShareTensor(PartyId.P1, RingTensor(a1, scale), tag),
        )

    @property
    def a0(self) -> np.ndarray:
        return self.s0.payload.data

    @property
    def a1(self) -> np.ndarray:
        return self.s1.payload.data

    @property
    def shape(self) -> tuple:
        return self.s0.payload.shape

    @property
    def scale(self) -> int:
        return self.s0.payload.scale

    @property
    def tag(self) -> str:
        return self.s0.session_tag

    def local(self, fn: Callable[[np.ndarray], np.ndarray], scale: int | None = None) -> "Shared":
        """Apply the same linear, public map to both halves."""
        return Shared.from_arrays(fn(self.a0), fn(self.a1), self.scale if scale is None else scale, self.tag)

    def _check(self, other: "Shared"):
        if self.tag != other.tag:
            raise ValueError("shares belong to different sessions")
        if self.shape != other.shape:
            raise ShapeError(f"shape mismatch {self.shape} vs {other.shape}")
        if self.scale != other.scale:
            raise ScaleError(f"scale mismatch {self.scale} vs {other.scale}")

    def __add__(self, other: "Shared") -> "Shared":
        return add_shares(self, other)

    def __sub__(self, other: "Shared") -> "Shared":
        self._check(other)
        return Shared.from_arrays(self.a0 - other.a0, self.a1 - other.a1, self.scale, self.tag)

    def __neg__(self) -> "Shared":
        return self.local(lambda a: _ZERO - a)

    def __getitem__(self, idx) -> "Shared":
        return self.local(lambda a: np.ascontiguousarray(a[idx]))

    @property
    def T(self) -> "Shared":
        return self.local(lambda a: np.ascontiguousarray(a.T))

    def reshape(self, *shape) -> "Shared":
        return self.local(lambda a: a.reshape(*shape))

    def with_scale(self, scale: int) -> "Shared":
        return self.local(lambda a: a, scale=scale)

    def __repr__(self):
        return f"Shared(shape={self.shape}, scale={self.scale}, tag={self.tag!r})"


def stack_shares(parts: Sequence[Shared], axis: int = 0) -> Shared:
    first = parts[0]
    return Shared.from_arrays(
        np.stack([p.a0 for p in parts], axis), np.stack([p.a1 for p in parts], axis), first.scale, first.tag
    )


def concat_shares(parts: Sequence[Shared], axis: int = 0) -> Shared:
    first = parts[0]
    return Shared.from_arrays(
        np.concatenate([p.a0 for p in parts], axis),
        np.concatenate([p.a1 for p in parts], axis),
        first.scale,
        first.tag,
    )


def add_shares(a: Shared, b: Shared) -> Shared:
    a._check(b)
    return Shared.from_arrays(a.a0 + b.a0, a.a1 + b.a1, a.scale, a.tag)


def add_public(a: Shared, c: RingTensor) -> Shared:
    """P0 adds the public constant; P1's half is untouched."""
    if c.scale != a.scale:
        raise ScaleError(f"scale mismatch {a.scale} vs {c.scale}")
    return Shared.from_arrays(a.a0 + np.broadcast_to(c.data, a.shape), a.a1.copy(), a.scale, a.tag)


def mul_public(a: Shared, c: RingTensor) -> Shared:
    """Elementwise product with a public tensor (broadcasting); scales add."""
    return Shared.from_arrays(a.a0 * c.data, a.a1 * c.data, a.scale + c.scale, a.tag)


def matmul_public(a: Shared, w: RingTensor) -> Shared:
    """⟦A⟧·W for public W, computed locally by both parties."""
    if a.shape[-1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {w.shape}")
    return Shared.from_arrays(ring_matmul(a.a0, w.data), ring_matmul(a.a1, w.data), a.scale + w.scale, a.tag)


def truncate_shares(a: Shared, bits: int | None = None) -> Shared:
    """Share-local arithmetic shift.

    P0 shifts its half, P1 shifts the negation of its half and negates back.
    The reconstruction is off from the exact shift by at most one unit, and
    wrong by a large amount only with probability about |x|/2^63.
    """
    if bits is None:
        if a.scale % 2:
            raise ScaleError(f"cannot infer truncation width for odd scale {a.scale}")
        bits = a.scale // 2
    if bits > a.scale:
        raise ScaleError(f"cannot shift {bits} bits off scale {a.scale}")
    t0 = np.right_shift(to_signed(a.a0), bits).view(np.uint64)
    t1 = _ZERO - np.right_shift(to_signed(_ZERO - a.a1), bits).view(np.uint64)
    return Shared.from_arrays(t0, t1, a.scale - bits, a.tag)


# --------------------------------------------------------------------------
# session

class Session:
    """One two-party protocol run.

    ``insecure=True`` is the only way to allow :func:`declassify`; it exists
    for the insecure baseline.  ``debug=True`` enables oracle-side bounds
    checks inside ideal functionalities.
    """

    def __init__(
        self,
        seed: int = 0,
        *,
        insecure: bool = False,
        cost_model: CostModel | None = None,
        frac_bits: int = DEFAULT_FRAC_BITS,
        transport: str = "duplex",
        debug: bool = False,
        pool_cap: int | None = None,
        tag: str | None = None,
    ):
        self.seed = int(seed)
        self.tag = tag or f"session-{self.seed}"
        self.insecure = insecure
        self.cost_model = cost_model or CostModel.default()
        self.frac_bits = frac_bits
        self.codec = FixedPointCodec(frac_bits)
        self.debug = debug
        self.dealer = Dealer(self.seed, pool_cap)
        self._input_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, 0x1A])))
        if transport == "duplex":
            self.channel = DuplexChannel()
        elif transport == "socket":
            self.channel = SocketChannel()
        else:
            raise ValueError(f"unknown transport {transport!r}")
        self.transcript = Transcript()
        self.round = 0
        self.counters: Counter = Counter()
        self._scopes: list[str] = []
        self.closed = False

    # lifecycle -----------------------------------------------------------
    def close(self):
        if not self.closed:
            self.channel.close()
            self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _ensure_open(self):
        if self.closed:
            raise SessionClosedError(f"session {self.tag} is closed")

    # labels ----------------------------------------------------------------
    @contextlib.contextmanager
    def scope(self, name: str):
        self._scopes.append(name)
        try:
            yield
        finally:
            self._scopes.pop()

    def label(self, base: str) -> str:
        return "/".join(self._scopes + [base])

    # sharing ---------------------------------------------------------------
    def share(self, secret: RingTensor) -> Shared:
        """Split a secret: P1 gets a uniform mask, P0 gets secret − mask."""
        self._ensure_open()
        r = self._input_rng.bit_generator.random_raw(secret.size).astype(np.uint64).reshape(secret.shape)
        return Shared.from_arrays(secret.data - r, r, secret.scale, self.tag)

    def share_real(self, values, f: int | None = None) -> Shared:
        f = self.frac_bits if f is None else f
        return self.share(RingTensor(FixedPointCodec(f).encode(values), f))

    def share_int(self, values) -> Shared:
        return self.share(RingTensor(np.asarray(values, dtype=np.int64).view(np.uint64), 0))

    def reconstruct(self, x: Shared) -> RingTensor:
        """Harness-side opening; not part of any protocol, never transcribed."""
        if x.s0.session_tag != x.s1.session_tag:
            raise ValueError("halves come from different sessions")
        if x.s0.payload.shape != x.s1.payload.shape or x.s0.payload.scale != x.s1.payload.scale:
            raise ShapeError("halves disagree in shape or scale")
        if x.s0.owner == x.s1.owner:
            raise ValueError("both halves claim the same owner")
        return RingTensor(x.a0 + x.a1, x.scale)

    def reshare(self, value: np.ndarray, scale: int) -> Shared:
        """Dealer-masked sharing of a value produced inside an ideal functionality."""
        v0, v1 = self.dealer.split(np.asarray(value, dtype=np.uint64))
        return Shared.from_arrays(v0, v1, scale, self.tag)

    # communication ---------------------------------------------------------
    def exchange(self, base: str, msg0: np.ndarray, msg1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One simultaneous round: P0 sends msg0, P1 sends msg1.

        Returns (what P0 received, what P1 received).
        """
        self._ensure_open()
        label = self.label(base)
        for sender, msg in ((PartyId.P0, msg0), (PartyId.P1, msg1)):
            self.channel.send(sender, encode_frame(sender, label, msg))
            self.transcript.append(self.round, sender, label, np.asarray(msg).size * 8)
        _, _, got0 = decode_frame(self.channel.recv(PartyId.P0))
        _, _, got1 = decode_frame(self.channel.recv(PartyId.P1))
        self.round += 1
        return got0, got1

    def send(self, sender: PartyId, base: str, msg: np.ndarray) -> np.ndarray:
        self._ensure_open()
        label = self.label(base)
        self.channel.send(sender, encode_frame(sender, label, msg))
        self.transcript.append(self.round, sender, label, np.asarray(msg).size * 8)
        _, _, got = decode_frame(self.channel.recv(PartyId(sender).other))
        self.round += 1
        return got

    def meter(
        self,
        primitive: str,
        elements: int,
        base: str | None = None,
        sender: PartyId = PartyId.P0,
        advance: bool = True,
    ):
        """Charge the cost model for ``elements`` units of ``primitive``.

        With ``advance=False`` the round counter is left alone so several
        messages can share one round (see :meth:`advance`).
        """
        self._ensure_open()
        cost = self.cost_model[primitive]
        self.counters[primitive] += int(elements)
        if cost.bytes_per_element == 0 and cost.rounds == 0:
            return
        self.transcript.append(self.round, sender, self.label(base or primitive), cost.bytes_per_element * int(elements))
        if advance:
            self.round += cost.rounds

    def advance(self, rounds: int):
        self.round += int(rounds)

    def ideal(
        self,
        primitive: str,
        inputs: Sequence[Shared],
        fn: Callable[..., np.ndarray],
        out_scale: int,
        elements: int | None = None,
    ) -> Shared:
        """Evaluate ``fn`` on reconstructed inputs inside a sealed oracle.

        The result is re-shared with fresh dealer masks; neither party sees
        anything but uniform noise.
        """
        self._ensure_open()
        opened = [self.reconstruct(x) for x in inputs]
        out = np.asarray(fn(*opened), dtype=np.uint64)
        self.meter(primitive, out.size if elements is None else elements)
        return self.reshare(out, out_scale)


# --------------------------------------------------------------------------
# interactive protocols

def share(session: Session, secret: RingTensor) -> tuple[ShareTensor, ShareTensor]:
    x = session.share(secret)
    return x.s0, x.s1


def reconstruct(s0: ShareTensor, s1: ShareTensor) -> RingTensor:
    if s0.session_tag != s1.session_tag:
        raise ValueError("halves come from different sessions")
    if s0.payload.shape != s1.payload.shape or s0.payload.scale != s1.payload.scale:
        raise ShapeError("halves disagree in shape or scale")
    return RingTensor(s0.payload.data + s1.payload.data, s0.payload.scale)


def beaver_matmul(session: Session, a: Shared, b: Shared, label: str = "beaver-matmul") -> Shared:
    """⟦A⟧·⟦B⟧ with one dealer matrix triple and one round of masked openings.

    Result scale is the sum of operand scales; callers truncate.
    """
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    m, p = a.shape
    q = b.shape[1]
    (u0, v0, z0), (u1, v1, z1) = session.dealer.matmul_triple(m, p, q)
    e0, f0 = a.a0 - u0, b.a0 - v0
    e1, f1 = a.a1 - u1, b.a1 - v1
    got0, got1 = session.exchange(
        label, np.concatenate([e0.ravel(), f0.ravel()]), np.concatenate([e1.ravel(), f1.ravel()])
    )
    # each party reassembles the openings from its own half and the peer's
    e = e0 + got0[: m * p].reshape(m, p)
    f = f0 + got0[m * p:].reshape(p, q)
    e_b = e1 + got1[: m * p].reshape(m, p)
    f_b = f1 + got1[m * p:].reshape(p, q)
    assert np.array_equal(e, e_b) and np.array_equal(f, f_b)
    c0 = z0 + ring_matmul(e, v0) + ring_matmul(u0, f) + ring_matmul(e, f)
    c1 = z1 + ring_matmul(e, v1) + ring_matmul(u1, f)
    session.counters["beaver-matmul"] += 1
    return Shared.from_arrays(c0, c1, a.scale + b.scale, a.tag)


def beaver_mul(session: Session, a: Shared, b: Shared, label: str = "mul", primitive: str = "mul") -> Shared:
    """Elementwise ⟦a⟧⊙⟦b⟧ (operands broadcast to a common shape first)."""
    shape = np.broadcast_shapes(a.shape, b.shape)
    a0, a1 = np.broadcast_to(a.a0, shape), np.broadcast_to(a.a1, shape)
    b0, b1 = np.broadcast_to(b.a0, shape), np.broadcast_to(b.a1, shape)
    (u0, v0, z0), (u1, v1, z1) = session.dealer.mul_triple(shape)
    e0, f0 = a0 - u0, b0 - v0
    e1, f1 = a1 - u1, b1 - v1
    n = int(np.prod(shape, dtype=np.int64))
    got0, _ = session.exchange(
        label, np.concatenate([e0.ravel(), f0.ravel()]), np.concatenate([e1.ravel(), f1.ravel()])
    )
    e = e0 + got0[:n].reshape(shape)
    f = f0 + got0[n:].reshape(shape)
    c0 = z0 + e * v0 + u0 * f + e * f
    c1 = z1 + e * v1 + u1 * f
    session.meter(primitive, n, base=label + ":surcharge")
    return Shared.from_arrays(c0, c1, a.scale + b.scale, a.tag)


def declassify(session: Session, x: Shared, label: str = "declassify") -> RingTensor:
    """Open ⟦x⟧ to both parties; only allowed in insecure-mode sessions."""
    if not session.insecure:
        raise PolicyError("declassify is only permitted in insecure-mode sessions")
    got0, got1 = session.exchange(label, x.a0.ravel(), x.a1.ravel())
    v0 = x.a0 + got0.reshape(x.shape)
    v1 = x.a1 + got1.reshape(x.shape)
    assert np.array_equal(v0, v1)
    return RingTensor(v0, x.scale)
