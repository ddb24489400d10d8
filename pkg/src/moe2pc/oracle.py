"""Plaintext references, written as naive loops on purpose.

Nothing here imports the secure path.  The only thing shared with it is the
tie rule: higher score first, then the smaller position.
"""

from __future__ import annotations

import math

import numpy as np


def _tie_key(score: float, position: int):
    return (-score, position)


def silu(z):
    return z / (1.0 + np.exp(-z))


def swiglu(x: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray, w_down: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return (silu(x @ w_gate) * (x @ w_up)) @ w_down


def gate_probs(x: np.ndarray, gate: np.ndarray) -> np.ndarray:
    logits = x @ gate.T
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def route(x: np.ndarray, gate: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(W, K), each m×k: selected scores and expert ids per token."""
    probs = gate_probs(x, gate)
    m, n = probs.shape
    W = np.zeros((m, k))
    K = np.zeros((m, k), dtype=np.int64)
    for j in range(m):
        order = sorted(range(n), key=lambda i: _tie_key(probs[j, i], i))[:k]
        for slot, i in enumerate(order):
            W[j, slot] = probs[j, i]
            K[j, slot] = i
    return W, K


def _expert(model, i, x):
    e = model.experts
    return swiglu(x, e.w_gate[i], e.w_up[i], e.w_down[i])


def plain_moe(x: np.ndarray, model, k: int | None = None) -> np.ndarray:
    """Σ_{i ∈ top-k(x_j)} W_ji · E_i(x_j) for every token."""
    k = model.config.k if k is None else k
    W, K = route(x, model.gate, k)
    y = np.zeros_like(x, dtype=np.float64)
    for j in range(x.shape[0]):
        for slot in range(k):
            y[j] += W[j, slot] * _expert(model, K[j, slot], x[j])[0]
    return y


def plain_moe_straightline(x: np.ndarray, model, k: int | None = None) -> np.ndarray:
    """Second, independent formulation: full softmax weights masked to the top-k support."""
    k = model.config.k if k is None else k
    probs = gate_probs(x, model.gate)
    n = probs.shape[1]
    y = np.zeros_like(x, dtype=np.float64)
    for i in range(n):
        out = _expert(model, i, x)
        for j in range(x.shape[0]):
            better = sum(1 for q in range(n) if probs[j, q] > probs[j, i] or (probs[j, q] == probs[j, i] and q < i))
            if better < k:
                y[j] += probs[j, i] * out[j]
    return y


def dense_moe(x: np.ndarray, model) -> np.ndarray:
    """All experts weighted by the full softmax (no top-k)."""
    probs = gate_probs(x, model.gate)
    return sum(probs[:, [i]] * _expert(model, i, x) for i in range(probs.shape[1]))


def plain_dispatch(W: np.ndarray, K: np.ndarray, n: int, t: int) -> list[dict]:
    """Brute-force balanced dispatcher over the flattened k·m candidates.

    Per expert returns the t chosen candidate positions (best first), their
    token ids and scores (0 for dummy picks), and the kept/dropped routed
    tokens as {token: score}.
    """
    m, k = W.shape
    flat_w = W.reshape(-1)
    flat_k = K.reshape(-1)
    out = []
    for i in range(n):
        prio = [flat_w[p] if flat_k[p] == i else 0.0 for p in range(m * k)]
        order = sorted(range(m * k), key=lambda p: _tie_key(prio[p], p))
        chosen = order[:t]
        routed = {p // k: flat_w[p] for p in range(m * k) if flat_k[p] == i}
        kept = {p // k: prio[p] for p in chosen if flat_k[p] == i}
        dropped = {j: s for j, s in routed.items() if j not in kept}
        out.append({
            "positions": chosen,
            "tokens": [p // k for p in chosen],
            "scores": [prio[p] for p in chosen],
            "kept": kept,
            "dropped": dropped,
        })
    return out


def plain_balanced_moe(x: np.ndarray, model, k: int | None = None, t: int | None = None) -> np.ndarray:
    """Top-k MoE where each expert keeps only its t highest-scoring routed tokens."""
    k = model.config.k if k is None else k
    t = model.config.t if t is None else t
    W, K = route(x, model.gate, k)
    n = model.config.n
    y = np.zeros_like(x, dtype=np.float64)
    for i in range(n):
        routed = [(W[j, s], j) for j in range(x.shape[0]) for s in range(k) if K[j, s] == i]
        routed.sort(key=lambda r: _tie_key(r[0], r[1]))
        for score, j in routed[:t]:
            y[j] += score * _expert(model, i, x[j])[0]
    return y


def plain_balanced_moe_enumerative(x: np.ndarray, model, k: int | None = None, t: int | None = None) -> np.ndarray:
    """Same output, decided pair by pair: (i, j) survives iff fewer than t
    routed tokens of expert i beat token j."""
    k = model.config.k if k is None else k
    t = model.config.t if t is None else t
    W, K = route(x, model.gate, k)
    m, n = x.shape[0], model.config.n
    score = np.zeros((n, m))
    routed = np.zeros((n, m), dtype=bool)
    for j in range(m):
        for s in range(k):
            score[K[j, s], j] = W[j, s]
            routed[K[j, s], j] = True
    y = np.zeros_like(x, dtype=np.float64)
    for i in range(n):
        for j in range(m):
            if not routed[i, j]:
                continue
            beaten_by = sum(
                1 for q in range(m)
                if routed[i, q] and (score[i, q] > score[i, j] or (score[i, q] == score[i, j] and q < j))
            )
            if beaten_by < t:
                y[j] += score[i, j] * _expert(model, i, x[j])[0]
    return y


def max_expert_load(x: np.ndarray, model, k: int | None = None) -> int:
    k = model.config.k if k is None else k
    _, K = route(x, model.gate, k)
    return int(np.bincount(K.reshape(-1), minlength=model.config.n).max())


# --------------------------------------------------------------------------
# rotation counts


def _pow2_at_least(x: int) -> int:
    p = 1
    while p < x:
        p *= 2
    return p


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def bsgs_rotations(in_cts: int, out_cts: int, blocks: int, baby: int | None = None) -> int:
    """Baby steps on every input ciphertext, giant steps on every output one."""
    def cost(b):
        return in_cts * (b - 1) + out_cts * (_ceil_div(blocks, b) - 1)

    if baby is not None:
        return cost(baby)
    return min(cost(b) for b in range(1, blocks + 1))


def rotation_count(scheme: str, n: int, t: int, d1: int, d2: int, N: int, baby: int | None = None) -> int:
    """Closed-form rotation totals.

    bolt  = ceil(n·t·d1/N)·(N/t − 1)
    batch = ceil(n·t·d1/N)·(N/(n·t) − 1)
    with t (resp. n·t) rounded up to a power of two, and the BSGS variants
    split into baby/giant phases.
    """
    if scheme == "bolt":
        blocks = N // _pow2_at_least(t)
        return _ceil_div(n * d1, blocks) * (blocks - 1)
    if scheme == "batch":
        blocks = N // _pow2_at_least(n * t)
        return _ceil_div(d1, blocks) * (blocks - 1)
    if scheme == "batch_bsgs":
        blocks = N // _pow2_at_least(n * t)
        return bsgs_rotations(_ceil_div(d1, blocks), _ceil_div(d2, blocks), blocks, baby)
    if scheme == "bolt_bsgs":
        blocks = N // _pow2_at_least(t)
        return n * bsgs_rotations(_ceil_div(d1, blocks), _ceil_div(d2, blocks), blocks, baby)
    raise ValueError(f"unknown scheme {scheme!r}")


# --------------------------------------------------------------------------
# sorting-network sizes


def oddeven_merge_count_pow2(length: int) -> int:
    """(p² − p + 4)·2^(p−2) − 1 comparators for length 2^p."""
    p = int(math.log2(length))
    if 1 << p != length:
        raise ValueError("length must be a power of two")
    if p == 0:
        return 0
    return (p * p - p + 4) * 2 ** (p - 2) - 1 if p >= 2 else 1


def oddeven_merge_count(length: int) -> int:
    """Comparators of the padded network restricted to positions < length.

    Walks the recursive formulation (merge of two sorted halves) rather than
    the layered one used by the secure path.
    """
    if length <= 1:
        return 0
    size = _pow2_at_least(length)
    count = 0

    def merge(lo, hi, r):
        nonlocal count
        step = 2 * r
        if step < hi - lo:
            merge(lo, hi, step)
            merge(lo + r, hi, step)
            for i in range(lo + r, hi - r, step):
                if i + r < length:
                    count += 1
        elif lo + r < length:
            count += 1

    def sort(lo, hi):
        if hi - lo >= 1:
            mid = lo + (hi - lo) // 2
            sort(lo, mid)
            sort(mid + 1, hi)
            merge(lo, hi, 1)

    sort(0, size - 1)
    return count


def routing_margin(x: np.ndarray, model, k: int | None = None, t: int | None = None) -> float:
    """Smallest score gap that decides any selection.

    Covers the k-th vs (k+1)-th expert of every token and, for overloaded
    experts, the t-th vs (t+1)-th routed token.  Instances with a margin
    below the fixed-point resolution are ill-posed for exact set comparison.
    """
    k = model.config.k if k is None else k
    t = model.config.t if t is None else t
    probs = gate_probs(x, model.gate)
    margin = math.inf
    n = probs.shape[1]
    if k < n:
        for row in probs:
            s = sorted(row, reverse=True)
            margin = min(margin, s[k - 1] - s[k])
    W, K = route(x, model.gate, k)
    for i in range(n):
        scores = sorted((W[j, s] for j in range(W.shape[0]) for s in range(k) if K[j, s] == i), reverse=True)
        if len(scores) > t:
            margin = min(margin, scores[t - 1] - scores[t])
    return margin
