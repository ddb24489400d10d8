"""Private mixture-of-experts layer: gate routing, dispatch, experts, combine.

Four execution modes share the gate and the SwiGLU experts:

``cryptomoe``   balanced routing (every expert gets exactly ``t`` rows),
                confidence-aware secure dispatch, batch-packed experts,
                one-hot secure combine.
``dense``       every expert runs on every token; unselected experts get
                weight zero.
``insecure``    routing is opened and tokens are grouped in the clear;
                experts run with whatever load they receive.
``cipherprune`` balanced routing realised by oblivious swaps of whole
                (score, index, embedding) records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DEFAULT_FRAC_BITS, FixedPointCodec, RingTensor, ring_matmul
from .errors import ConfigError, PolicyError, ShapeError
from .he import RotationCounter, ciphertext_counts, packed_matmul
from .jsonio import fail, read_json
from .protocols import (
    compare_exchange,
    pi_divpub,
    pi_equal,
    pi_mul,
    pi_mux,
    pi_onehot,
    pi_silu,
    pi_softmax,
    pi_topk,
)
from .shares import (
    PartyId,
    Session,
    Shared,
    beaver_matmul,
    declassify,
    mul_public,
    truncate_shares,
)

MODES = ("cryptomoe", "dense", "insecure", "cipherprune")
T_PRESETS = {"t=1.0": 1.0, "t=2.0": 2.0}


def tokens_per_expert(alpha: float, m: int, k: int, n: int) -> int:
    """t = ceil(alpha·m·k/n), kept within [1, k·m]."""
    return max(1, min(k * m, math.ceil(alpha * m * k / n - 1e-9)))


@dataclass
class GateConfig:
    n: int
    k: int
    m: int
    d: int
    dffn: int
    t_factor: float = 2.0
    mode: str = "cryptomoe"
    N: int = 8192
    frac_bits: int = DEFAULT_FRAC_BITS
    t_override: int | None = None

    def __post_init__(self):
        if isinstance(self.t_factor, str):
            if self.t_factor not in T_PRESETS:
                raise ConfigError(f"unknown t preset {self.t_factor!r}", field="t_factor")
            self.t_factor = T_PRESETS[self.t_factor]
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}", field="mode")
        if not 1 <= self.k <= self.n:
            raise ConfigError(f"need 1 <= k <= n, got k={self.k}, n={self.n}", field="k")
        if min(self.m, self.d, self.dffn) < 1:
            raise ConfigError("m, d and dffn must be positive")
        if self.t_override is not None and not 1 <= self.t_override <= self.k * self.m:
            raise ConfigError(f"t must lie in [1, k·m={self.k * self.m}]", field="t")

    @property
    def t(self) -> int:
        if self.t_override is not None:
            return self.t_override
        return tokens_per_expert(self.t_factor, self.m, self.k, self.n)


@dataclass
class ExpertWeights:
    """Real-valued weights, stacked over experts."""

    w_gate: np.ndarray  # n, d, dffn
    w_up: np.ndarray  # n, d, dffn
    w_down: np.ndarray  # n, dffn, d

    def __post_init__(self):
        self.w_gate = np.asarray(self.w_gate, dtype=np.float64)
        self.w_up = np.asarray(self.w_up, dtype=np.float64)
        self.w_down = np.asarray(self.w_down, dtype=np.float64)
        n, d, dffn = self.w_gate.shape
        if self.w_up.shape != (n, d, dffn) or self.w_down.shape != (n, dffn, d):
            raise ShapeError("expert weight shapes are inconsistent")

    @property
    def n(self) -> int:
        return self.w_gate.shape[0]


@dataclass
class MoEModel:
    config: GateConfig
    gate: np.ndarray  # n, d
    experts: ExpertWeights
    seed: int = 0
    _encoded: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        c = self.config
        self.gate = np.asarray(self.gate, dtype=np.float64)
        if self.gate.shape != (c.n, c.d):
            raise ShapeError(f"gate must be {c.n}x{c.d}, got {self.gate.shape}")
        if self.experts.w_gate.shape != (c.n, c.d, c.dffn):
            raise ShapeError("expert weights do not match the configuration")

    @classmethod
    def random(cls, config: GateConfig, seed: int = 0, scale: float = 0.1) -> "MoEModel":
        rng = np.random.default_rng(seed)
        n, d, h = config.n, config.d, config.dffn
        u = lambda *s: rng.uniform(-scale, scale, s)  # noqa: E731
        return cls(config, u(n, d), ExpertWeights(u(n, d, h), u(n, d, h), u(n, h, d)), seed)

    def encoded(self, name: str) -> list[RingTensor]:
        """Per-expert plaintext weight matrices at the model's fixed-point scale."""
        if name not in self._encoded:
            f = self.config.frac_bits
            codec = FixedPointCodec(f)
            if name == "gate":
                mats = [self.gate.T]
            else:
                mats = list(getattr(self.experts, name))
            self._encoded[name] = [RingTensor(codec.encode(w), f) for w in mats]
        return self._encoded[name]

    # JSON ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, obj: dict, text: str | None = None) -> "MoEModel":
        required = ("n", "k", "m", "d", "dffn")
        for key in required:
            if key not in obj:
                raise ConfigError(f"missing required key '{key}'", field=key)
            if not isinstance(obj[key], int) or obj[key] < 1:
                fail(text, key, f"'{key}' must be a positive integer")
        kwargs = {key: obj[key] for key in required}
        for key in ("t_factor", "mode", "N", "frac_bits"):
            if key in obj:
                kwargs[key] = obj[key]
        if "t" in obj:
            kwargs["t_override"] = obj["t"]
        try:
            config = GateConfig(**kwargs)
        except ConfigError as exc:
            key = exc.field or ""
            fail(text, key, str(exc).split(": ", 1)[-1])
        seed = int(obj.get("seed", 0))
        weights = obj.get("weights")
        if weights is None:
            return cls.random(config, seed)
        try:
            experts = ExpertWeights(weights["w_gate"], weights["w_up"], weights["w_down"])
            return cls(config, weights["gate"], experts, seed)
        except KeyError as exc:
            fail(text, "weights", f"weights lack '{exc.args[0]}'", path=f"weights.{exc.args[0]}")
        except (ShapeError, ValueError) as exc:
            fail(text, "weights", str(exc))

    @classmethod
    def load(cls, path) -> "MoEModel":
        obj, text = read_json(path)
        return cls.from_dict(obj, text)

    def to_dict(self, include_weights: bool = True) -> dict:
        c = self.config
        obj = {"n": c.n, "k": c.k, "m": c.m, "d": c.d, "dffn": c.dffn, "t_factor": c.t_factor,
               "N": c.N, "frac_bits": c.frac_bits, "seed": self.seed}
        if c.t_override is not None:
            obj["t"] = c.t_override
        if include_weights:
            obj["weights"] = {
                "gate": self.gate.tolist(),
                "w_gate": self.experts.w_gate.tolist(),
                "w_up": self.experts.w_up.tolist(),
                "w_down": self.experts.w_down.tolist(),
            }
        return obj


@dataclass
class RoutingDecision:
    """Selected scores and expert ids, flattened token-major (token j at j·k .. j·k+k−1)."""

    w_flat: Shared
    k_flat: Shared
    k: int


@dataclass
class DispatchResult:
    x: list[Shared]  # per expert, t × d
    onehot: list[Shared]  # per expert, t × m, boolean
    scores: list[Shared]  # per expert, length t

    @property
    def t(self) -> int:
        return self.x[0].shape[0]


@dataclass
class MoEResult:
    y: Shared
    routing: RoutingDecision
    dispatch: DispatchResult | None
    counter: RotationCounter
    tokens_per_expert: list[int]
    compare_exchanges: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# linear layers through the HE path


def he_linear(
    session: Session,
    xs: list[Shared],
    ws: list[RingTensor],
    scheme: str,
    N: int,
    counter: RotationCounter,
    label: str = "he-matmul",
) -> list[Shared]:
    """⟦X_i⟧·W_i for public (server-held) W_i.

    The client's half goes through the packed ciphertext simulator; the
    server multiplies its own half locally and masks the homomorphic result
    before returning it.  Metering covers the ciphertexts in both directions.
    """
    a0 = [x.a0 for x in xs]
    res, _, _ = packed_matmul(scheme, a0, [w.data for w in ws], N, counter)
    t, d1 = xs[0].shape
    n_in, n_out = ciphertext_counts(scheme, len(xs), t, d1, ws[0].shape[1], N)
    session.meter("he-matmul-ct", n_in * N, base=label + ":ct-in", sender=PartyId.P0, advance=False)
    session.meter("he-matmul-ct", n_out * N, base=label + ":ct-out", sender=PartyId.P1, advance=False)
    session.advance(session.cost_model["he-matmul-ct"].rounds)
    out = []
    for x, w, c0 in zip(xs, ws, res):
        mask = session.dealer.random(c0.shape)
        out.append(Shared.from_arrays(c0 - mask, mask + ring_matmul(x.a1, w.data), x.scale + w.scale, x.tag))
    return out


# --------------------------------------------------------------------------
# the four steps


def gate_route(session: Session, x: Shared, model: MoEModel, counter: RotationCounter) -> RoutingDecision:
    """Softmax(x·Gᵀ), then per-token top-k over the n experts."""
    c = model.config
    with session.scope("gate"):
        (logits,) = he_linear(session, [x], model.encoded("gate"), "bolt", c.N, counter)
        probs = pi_softmax(session, truncate_shares(logits))
        top = pi_topk(session, probs, c.k)
    m = x.shape[0]
    return RoutingDecision(top.values.reshape(m * c.k), top.indices.reshape(m * c.k), c.k)


def dispatch(session: Session, x: Shared, routing: RoutingDecision, t: int, n: int) -> DispatchResult:
    """Confidence-aware secure dispatch: each expert keeps its t best candidates.

    Per expert i: mask the flattened scores by 1{K == i}, select the top t
    candidates, map candidate positions to token ids by division by k, and
    gather those token rows with a one-hot matrix product.  Zero-score picks
    are dummy rows.
    """
    m = x.shape[0]
    k = routing.k
    if not 1 <= t <= k * m:
        raise ShapeError(f"t={t} outside [1, k·m={k * m}]")
    xs, ohs, ss = [], [], []
    with session.scope("dispatch"):
        for i in range(n):
            with session.scope(f"expert{i}"):
                mask = pi_equal(session, routing.k_flat, i)
                prio = pi_mux(session, mask, routing.w_flat)
                top = pi_topk(session, prio, t)
                token_ids = pi_divpub(session, top.indices, k)
                onehot = pi_onehot(session, token_ids, m)
                with session.scope("retrieve"):
                    xs.append(beaver_matmul(session, onehot, x))
                ohs.append(onehot)
                ss.append(top.values)
    return DispatchResult(xs, ohs, ss)


def dispatch_cipherprune(session: Session, x: Shared, routing: RoutingDecision, t: int, n: int) -> DispatchResult:
    """Swap-based dispatch: t bubble passes over the k·m candidate records.

    Each comparator swaps the full (score, index, d-dim embedding) record, so
    communication grows linearly in d.  All experts advance through the same
    pass schedule together.
    """
    m, d = x.shape
    k = routing.k
    if not 1 <= t <= k * m:
        raise ShapeError(f"t={t} outside [1, k·m={k * m}]")
    length = k * m
    with session.scope("dispatch-cp"):
        ids = np.arange(n)[:, None]
        wide_k = routing.k_flat.local(lambda a: np.ascontiguousarray(np.broadcast_to(a, (n, length))))
        wide_w = routing.w_flat.local(lambda a: np.ascontiguousarray(np.broadcast_to(a, (n, length))))
        mask = pi_equal(session, wide_k, ids)
        prio = pi_mux(session, mask, wide_w)
        sc = [prio.a0.copy(), prio.a1.copy()]
        idx = [np.tile(np.arange(length, dtype=np.uint64), (n, 1)), np.zeros((n, length), dtype=np.uint64)]
        rows = np.arange(length) // k
        emb = [np.ascontiguousarray(np.broadcast_to(h[rows], (n, length, d))) for h in (x.a0, x.a1)]
        for pair in cipherprune_schedule(length, t):
            compare_exchange(session, sc, idx, emb, [pair])
        scores = Shared.from_arrays(sc[0][:, :t], sc[1][:, :t], prio.scale, x.tag)
        cand = Shared.from_arrays(idx[0][:, :t], idx[1][:, :t], 0, x.tag)
        token_ids = pi_divpub(session, cand, k)
        onehot = pi_onehot(session, token_ids, m)
    xs = [Shared.from_arrays(emb[0][i, :t], emb[1][i, :t], x.scale, x.tag) for i in range(n)]
    return DispatchResult(xs, [onehot[i] for i in range(n)], [scores[i] for i in range(n)])


def cipherprune_schedule(length: int, t: int) -> list[tuple[int, int]]:
    """Comparator sequence of t bubble passes; pass p floats the p-th best to p."""
    return [(j - 1, j) for p in range(t) for j in range(length - 1, p, -1)]


def swiglu_experts(
    session: Session,
    xs: list[Shared],
    model: MoEModel,
    scheme: str,
    counter: RotationCounter,
    experts: list[int] | None = None,
) -> list[Shared]:
    """(SiLU(X·Wg) ⊙ (X·Wu))·Wd for each listed expert, all linear layers over HE."""
    c = model.config
    experts = list(range(len(xs))) if experts is None else experts
    wg = [model.encoded("w_gate")[i] for i in experts]
    wu = [model.encoded("w_up")[i] for i in experts]
    wd = [model.encoded("w_down")[i] for i in experts]
    with session.scope("expert"):
        g = [truncate_shares(v) for v in he_linear(session, xs, wg, scheme, c.N, counter, "gate-proj")]
        u = [truncate_shares(v) for v in he_linear(session, xs, wu, scheme, c.N, counter, "up-proj")]
        rows = [v.shape[0] for v in g]
        g_all = Shared.from_arrays(np.concatenate([v.a0 for v in g]), np.concatenate([v.a1 for v in g]), g[0].scale, g[0].tag)
        u_all = Shared.from_arrays(np.concatenate([v.a0 for v in u]), np.concatenate([v.a1 for v in u]), u[0].scale, u[0].tag)
        h_all = truncate_shares(pi_mul(session, pi_silu(session, g_all), u_all))
        offs = np.cumsum([0] + rows)
        hs = [h_all[offs[j]:offs[j + 1]] for j in range(len(rows))]
        return [truncate_shares(v) for v in he_linear(session, hs, wd, scheme, c.N, counter, "down-proj")]


def expert_forward(
    session: Session, result: DispatchResult, model: MoEModel, packing: str, counter: RotationCounter
) -> list[Shared]:
    return swiglu_experts(session, result.x, model, packing, counter)


def combine(session: Session, result: DispatchResult, outputs: list[Shared]) -> Shared:
    """y = Σ_i (onehot_iᵀ ⊙ S_i)·y_i, a scored one-hot reordering."""
    total = None
    with session.scope("combine"):
        for i, (oh, s, y) in enumerate(zip(result.onehot, result.scores, outputs)):
            with session.scope(f"expert{i}"):
                scored = pi_mul(session, oh.T, s.reshape(1, -1))
                part = beaver_matmul(session, scored, y)
            total = part if total is None else total + part
    return truncate_shares(total)


# --------------------------------------------------------------------------
# full layer


def moe_forward(
    mode: str,
    session: Session,
    x: Shared,
    model: MoEModel,
    packing: str | None = None,
) -> MoEResult:
    """One MoE layer under the given mode; output shares at the model scale."""
    c = model.config
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "insecure" and not session.insecure:
        raise PolicyError("insecure mode requires an insecure-flagged session")
    if x.shape != (c.m, c.d):
        raise ShapeError(f"input must be {c.m}x{c.d}, got {x.shape}")
    counter = RotationCounter()
    routing = gate_route(session, x, model, counter)
    if mode in ("cryptomoe", "cipherprune"):
        t = c.t
        before = session.counters["compare_exchange"]
        if mode == "cryptomoe":
            disp = dispatch(session, x, routing, t, c.n)
        else:
            disp = dispatch_cipherprune(session, x, routing, t, c.n)
        compares = {"dispatch": session.counters["compare_exchange"] - before}
        ys = expert_forward(session, disp, model, packing or "batch", counter)
        y = combine(session, disp, ys)
        return MoEResult(y, routing, disp, counter, [t] * c.n, compares)
    if mode == "dense":
        return _dense(session, x, model, routing, counter, packing or "batch")
    return _insecure(session, x, model, routing, counter, packing or "bolt")


def _dense(session, x, model, routing, counter, packing) -> MoEResult:
    c = model.config
    m, k, n = c.m, c.k, c.n
    ys = swiglu_experts(session, [x] * n, model, packing, counter)
    with session.scope("dense-combine"):
        wide_k = routing.k_flat.local(lambda a: np.ascontiguousarray(np.broadcast_to(a, (n, m * k))))
        mask = pi_equal(session, wide_k, np.arange(n)[:, None])
        wide_w = routing.w_flat.local(lambda a: np.ascontiguousarray(np.broadcast_to(a, (n, m * k))))
        picked = pi_mux(session, mask, wide_w)  # n × km
        # per-token weight of expert i: sum over the k slots of token j
        weight = picked.local(lambda a: a.reshape(n, m, k).sum(axis=2, dtype=np.uint64))
        y_all = Shared.from_arrays(np.stack([v.a0 for v in ys]), np.stack([v.a1 for v in ys]), ys[0].scale, x.tag)
        weighted = pi_mul(session, weight.reshape(n, m, 1), y_all)
        y = truncate_shares(weighted.local(lambda a: a.sum(axis=0, dtype=np.uint64)))
    return MoEResult(y, routing, None, counter, [m] * n)


def _insecure(session, x, model, routing, counter, packing) -> MoEResult:
    c = model.config
    m, k, n, f = c.m, c.k, c.n, c.frac_bits
    with session.scope("reveal"):
        w = declassify(session, routing.w_flat)
        kk = declassify(session, routing.k_flat).signed()
    groups = [[p for p in range(m * k) if kk[p] == i] for i in range(n)]
    loads = [len(g) for g in groups]
    active = [i for i in range(n) if groups[i]]
    total = Shared.from_arrays(np.zeros((m, c.d), np.uint64), np.zeros((m, c.d), np.uint64), 2 * f, x.tag)
    for i in active:
        rows = np.array([p // k for p in groups[i]])
        (y_i,) = swiglu_experts(session, [x[rows]], model, packing, counter, experts=[i])
        scaled = mul_public(y_i, RingTensor(w.data[groups[i]][:, None], f))
        acc0, acc1 = total.a0.copy(), total.a1.copy()
        np.add.at(acc0, rows, scaled.a0)
        np.add.at(acc1, rows, scaled.a1)
        total = Shared.from_arrays(acc0, acc1, 2 * f, x.tag)
    return MoEResult(truncate_shares(total), routing, None, counter, loads)
