import json

import numpy as np
import pytest

from moe2pc import oracle
from moe2pc.errors import ConfigError, PolicyError, ShapeError
from moe2pc.harness import make_instance
from moe2pc.he import RotationCounter
from moe2pc.moe import (
    ExpertWeights,
    GateConfig,
    MoEModel,
    RoutingDecision,
    cipherprune_schedule,
    combine,
    dispatch,
    dispatch_cipherprune,
    gate_route,
    moe_forward,
    swiglu_experts,
    tokens_per_expert,
)
from moe2pc.shares import Session

F = 12
TOL = 2.0 ** (-F + 4)


def routing_from(s, W, K):
    W, K = np.asarray(W, float), np.asarray(K)
    return RoutingDecision(s.share_real(W.reshape(-1)), s.share_int(K.reshape(-1)), W.shape[1])


def opened_dispatch(s, res):
    out = []
    for oh, sc in zip(res.onehot, res.scores):
        tokens = s.reconstruct(oh).signed().argmax(axis=1).tolist()
        out.append((tokens, s.reconstruct(sc).decode().tolist()))
    return out


def run_mode(mode, model, x, seed=0):
    with Session(seed, insecure=mode == "insecure") as s:
        res = moe_forward(mode, s, s.share_real(x), model)
        return s.reconstruct(res.y).decode(), res, s


def test_tokens_per_expert():
    assert tokens_per_expert(2.0, 32, 2, 8) == 16
    assert tokens_per_expert(1.0, 3, 1, 4) == 1
    assert tokens_per_expert(100.0, 4, 2, 2) == 8
    assert GateConfig(n=4, k=2, m=4, d=2, dffn=2, t_factor="t=1.0").t == 2


def test_gate_config_validation():
    with pytest.raises(ConfigError):
        GateConfig(n=2, k=3, m=4, d=2, dffn=2)
    with pytest.raises(ConfigError):
        GateConfig(n=2, k=1, m=4, d=2, dffn=2, t_factor="t=3.0")
    with pytest.raises(ConfigError):
        GateConfig(n=2, k=1, m=4, d=2, dffn=2, t_override=9)


def test_gate_route_saturated_and_uniform():
    cfg = GateConfig(n=4, k=1, m=1, d=4, dffn=2, N=64)
    model = MoEModel.random(cfg)
    model.gate[:] = 0
    model.gate[2, 0] = 12.0
    with Session(0) as s:
        r = gate_route(s, s.share_real([[1.0, 0, 0, 0]]), model, RotationCounter())
        assert s.reconstruct(r.k_flat).signed().tolist() == [2]
        assert abs(s.reconstruct(r.w_flat).decode()[0] - oracle.gate_probs(np.eye(4)[:1], model.gate)[0, 2]) <= 2.0**-F
    cfg = GateConfig(n=4, k=2, m=1, d=4, dffn=2, N=64)
    model = MoEModel.random(cfg)
    model.gate[:] = 0
    with Session(0) as s:
        r = gate_route(s, s.share_real(np.ones((1, 4))), model, RotationCounter())
        assert s.reconstruct(r.k_flat).signed().tolist() == [0, 1]
        assert np.abs(s.reconstruct(r.w_flat).decode() - 0.25).max() <= 2.0**-F


def test_gate_route_random_toy():
    model, x = make_instance(0, n=8, k=2, m=16, d=32, dffn=8, N=1024)
    W, K = oracle.route(x, model.gate, 2)
    with Session(0) as s:
        r = gate_route(s, s.share_real(x), model, RotationCounter())
        assert s.reconstruct(r.k_flat).signed().reshape(16, 2).tolist() == K.tolist()
        assert np.abs(s.reconstruct(r.w_flat).decode().reshape(16, 2) - W).max() <= 2.0 ** (-F + 1)


def test_dispatch_two_tokens_four_experts():
    x = np.array([[0.5, -0.5, 0.25, 1.0], [1.0, 0.75, -1.0, 0.0]])
    with Session(0) as s:
        res = dispatch(s, s.share_real(x), routing_from(s, [[0.7], [0.6]], [[1], [3]]), t=1, n=4)
        got = [s.reconstruct(v).decode() for v in res.x]
        scores = [s.reconstruct(v).decode()[0] for v in res.scores]
    assert np.allclose(got[1], x[[0]]) and np.allclose(got[3], x[[1]])
    assert scores[0] == scores[2] == 0.0
    assert abs(scores[1] - 0.7) < 2.0**-F and abs(scores[3] - 0.6) < 2.0**-F


def test_dispatch_confidence_aware_drop():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    with Session(0) as s:
        res = dispatch(s, s.share_real(x), routing_from(s, [[0.3], [0.8]], [[0], [0]]), t=1, n=2)
        assert np.allclose(s.reconstruct(res.x[0]).decode(), x[[1]])


def test_dispatch_random_vs_bruteforce():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        k = int(rng.integers(1, min(4, n) + 1))
        m = int(rng.integers(1, 17))
        t = int(rng.integers(1, max(1, 2 * m * k // n) + 1))
        t = min(t, k * m)
        K = np.array([rng.choice(n, k, replace=False) for _ in range(m)])
        W = rng.integers(1, 64, (m, k)) / 64.0
        x = rng.uniform(-1, 1, (m, 3))
        with Session(int(rng.integers(1 << 30))) as s:
            res = dispatch(s, s.share_real(x), routing_from(s, W, K), t, n)
            got = opened_dispatch(s, res)
        for (tokens, scores), want in zip(got, oracle.plain_dispatch(W, K, n, t)):
            assert tokens == want["tokens"]
            assert np.allclose(scores, want["scores"], atol=2.0**-F)


def test_expert_forward_zero_and_hand_computed():
    cfg = GateConfig(n=1, k=1, m=1, d=1, dffn=1, N=16)
    experts = ExpertWeights([[[1.0]]], [[[0.5]]], [[[0.75]]])
    model = MoEModel(cfg, [[0.0]], experts)
    with Session(0) as s:
        (y0,) = swiglu_experts(s, [s.share_real([[0.0]])], model, "batch", RotationCounter())
        assert not s.reconstruct(y0).decode().any()
        (y1,) = swiglu_experts(s, [s.share_real([[1.0]])], model, "batch", RotationCounter())
        want = 1.0 / (1.0 + np.exp(-1.0)) * 0.5 * 0.75
        assert abs(s.reconstruct(y1).decode()[0, 0] - want) <= 4 * 2.0**-F


@pytest.mark.parametrize("scheme", ["bolt", "batch", "batch_bsgs", "bolt_bsgs"])
def test_expert_forward_random(scheme):
    model, x = make_instance(5, n=4, k=2, m=8, d=16, dffn=32, N=256)
    xs = [x[i:i + 4] for i in range(4)]
    with Session(0) as s:
        ys = swiglu_experts(s, [s.share_real(v) for v in xs], model, scheme, RotationCounter())
        for i, (v, y) in enumerate(zip(xs, ys)):
            e = model.experts
            ref = oracle.swiglu(v, e.w_gate[i], e.w_up[i], e.w_down[i])
            assert np.abs(s.reconstruct(y).decode() - ref).max() <= 2.0 ** (-F + 3)


def test_combine_identity_single_expert():
    rng = np.random.default_rng(0)
    y = rng.uniform(-1, 1, (3, 4))
    with Session(0) as s:
        res = dispatch(s, s.share_real(np.zeros((3, 4))), routing_from(s, np.ones((3, 1)), np.zeros((3, 1), int)), 3, 1)
        out = combine(s, res, [s.share_real(y)])
        assert np.abs(s.reconstruct(out).decode() - y).max() <= 2.0**-F


def test_combine_two_tokens_four_experts():
    cfg = GateConfig(n=4, k=1, m=2, d=4, dffn=4, N=64, t_override=1)
    model, _ = make_instance(9, n=4, k=1, m=2, d=4, dffn=4, N=64, t=1)
    x = np.array([[0.5, -0.5, 0.25, 1.0], [1.0, 0.75, -1.0, 0.0]])
    W, K = np.array([[0.7], [0.6]]), np.array([[1], [3]])
    with Session(0) as s:
        res = dispatch(s, s.share_real(x), routing_from(s, W, K), 1, 4)
        ys = swiglu_experts(s, res.x, model, "batch", RotationCounter())
        got = s.reconstruct(combine(s, res, ys)).decode()
    e = model.experts
    want = np.stack([0.7 * oracle.swiglu(x[0], e.w_gate[1], e.w_up[1], e.w_down[1])[0],
                     0.6 * oracle.swiglu(x[1], e.w_gate[3], e.w_up[3], e.w_down[3])[0]])
    assert cfg.t == 1
    assert np.abs(got - want).max() <= TOL


def test_modes_against_oracles():
    model, x = make_instance(3, n=4, k=2, m=8, d=16, dffn=32, N=512, t_factor=1.0)
    y, _, _ = run_mode("dense", model, x)
    assert np.abs(y - oracle.plain_moe(x, model)).max() <= TOL
    assert np.abs(y - oracle.plain_moe_straightline(x, model)).max() <= TOL
    y, _, _ = run_mode("insecure", model, x)
    assert np.abs(y - oracle.plain_moe(x, model)).max() <= TOL
    y, res, _ = run_mode("cryptomoe", model, x)
    assert np.abs(y - oracle.plain_balanced_moe(x, model)).max() <= TOL
    assert res.tokens_per_expert == [model.config.t] * 4


def test_insecure_equals_dense_when_k_is_n():
    model, x = make_instance(4, n=3, k=3, m=6, d=8, dffn=8, N=256)
    a, _, _ = run_mode("insecure", model, x)
    b, _, _ = run_mode("dense", model, x)
    assert np.abs(a - b).max() <= TOL


def test_cryptomoe_no_drop_equals_insecure():
    model, x = make_instance(6, n=4, k=2, m=8, d=8, dffn=16, N=512, t=16)
    a, _, _ = run_mode("cryptomoe", model, x)
    b, _, _ = run_mode("insecure", model, x)
    assert np.abs(a - b).max() <= TOL


def test_cipherprune_matches_score_dispatch():
    for seed in range(5):
        model, x = make_instance(seed, n=4, k=2, m=6, d=4, dffn=4, N=256, t_factor=1.0)
        outs = []
        for fn in (dispatch, dispatch_cipherprune):
            with Session(seed) as s:
                xs = s.share_real(x)
                r = gate_route(s, xs, model, RotationCounter())
                res = fn(s, xs, r, model.config.t, 4)
                outs.append((opened_dispatch(s, res), [s.reconstruct(v).data.tolist() for v in res.x]))
        assert outs[0] == outs[1]


def test_cipherprune_swap_count_toy():
    n, m, t, d, k = 4, 2, 1, 4, 2
    model, x = make_instance(1, n=n, k=k, m=m, d=d, dffn=4, N=64, t=t)
    schedule = cipherprune_schedule(k * m, t)
    # bubble pass p walks from the last position down to p
    brute = sum(k * m - 1 - p for p in range(t))
    assert len(schedule) == brute == 3
    with Session(0) as s:
        xs = s.share_real(x)
        r = gate_route(s, xs, model, RotationCounter())
        before = s.counters["compare_exchange"]
        dispatch_cipherprune(s, xs, r, t, n)
        assert s.counters["compare_exchange"] - before == n * brute


def test_cryptomoe_transcript_shape_input_independent():
    model, x = make_instance(2, n=4, k=2, m=8, d=8, dffn=8, N=256, t_factor=1.0)
    other = np.random.default_rng(99).uniform(-1, 1, x.shape)
    _, _, s1 = run_mode("cryptomoe", model, x)
    _, _, s2 = run_mode("cryptomoe", model, other, seed=5)
    assert s1.transcript.shape() == s2.transcript.shape()
    assert s1.transcript.total_bytes() == s2.transcript.total_bytes()


def test_mode_guards():
    model, x = make_instance(0, n=2, k=1, m=4, d=4, dffn=4, N=64)
    with Session(0) as s:
        with pytest.raises(PolicyError):
            moe_forward("insecure", s, s.share_real(x), model)
        with pytest.raises(ShapeError):
            moe_forward("cryptomoe", s, s.share_real(x[:2]), model)


def test_model_json_roundtrip(tmp_path):
    model, _ = make_instance(0, n=2, k=1, m=4, d=4, dffn=4, N=64)
    p = tmp_path / "model.json"
    p.write_text(json.dumps(model.to_dict(), indent=2))
    back = MoEModel.load(p)
    assert np.array_equal(back.gate, model.gate)
    assert np.array_equal(back.experts.w_down, model.experts.w_down)
    assert back.config == model.config


def test_model_json_field_diagnostics(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "n": 2,\n  "k": 1,\n  "m": 4,\n  "d": -4,\n  "dffn": 4\n}\n')
    with pytest.raises(ConfigError) as exc:
        MoEModel.load(p)
    assert exc.value.field == "d" and exc.value.line == 5
    p.write_text('{\n  "n": 2,\n  "k": 3,\n  "m": 4,\n  "d": 4,\n  "dffn": 4\n}\n')
    with pytest.raises(ConfigError) as exc:
        MoEModel.load(p)
    assert exc.value.field == "k" and exc.value.line == 3
