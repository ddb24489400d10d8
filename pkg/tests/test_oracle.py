import numpy as np
import pytest

from moe2pc import oracle
from moe2pc.harness import make_instance
from moe2pc.moe import GateConfig, MoEModel


def test_plain_moe_k_equals_n_is_dense():
    model, x = make_instance(0, n=4, k=4, m=6, d=8, dffn=16)
    assert np.allclose(oracle.plain_moe(x, model), oracle.dense_moe(x, model))


def test_single_expert_is_swiglu():
    model, x = make_instance(1, n=1, k=1, m=5, d=8, dffn=16)
    e = model.experts
    assert np.allclose(oracle.plain_moe(x, model), oracle.swiglu(x, e.w_gate[0], e.w_up[0], e.w_down[0]))


def test_two_formulations_agree():
    for seed in range(10):
        model, x = make_instance(seed, n=6, k=2, m=12, d=8, dffn=8)
        assert np.allclose(oracle.plain_moe(x, model), oracle.plain_moe_straightline(x, model))


def test_balanced_moe_no_drop_equals_plain():
    model, x = make_instance(2, n=4, k=2, m=10, d=8, dffn=8)
    load = oracle.max_expert_load(x, model)
    assert np.allclose(oracle.plain_balanced_moe(x, model, t=load), oracle.plain_moe(x, model))
    assert np.allclose(oracle.plain_balanced_moe(x, model, t=2 * 10), oracle.plain_moe(x, model))


def test_balanced_moe_t_zero():
    model, x = make_instance(3, n=4, k=2, m=6, d=8, dffn=8)
    assert not oracle.plain_balanced_moe(x, model, t=0).any()


def test_balanced_formulations_agree():
    overflowed = 0
    for seed in range(10):
        model, x = make_instance(seed, n=4, k=2, m=12, d=8, dffn=8, t_factor=1.0)
        overflowed += model.config.t < oracle.max_expert_load(x, model)
        a = oracle.plain_balanced_moe(x, model)
        b = oracle.plain_balanced_moe_enumerative(x, model)
        assert np.allclose(a, b)
    assert overflowed > 0


def test_plain_dispatch_kept_dominates_dropped():
    model, x = make_instance(4, n=4, k=2, m=16, d=8, dffn=8, t_factor=1.0)
    W, K = oracle.route(x, model.gate, 2)
    for entry in oracle.plain_dispatch(W, K, 4, model.config.t):
        if entry["kept"] and entry["dropped"]:
            assert min(entry["kept"].values()) >= max(entry["dropped"].values())
        assert len(entry["positions"]) == model.config.t


def test_route_tie_rule():
    cfg = GateConfig(n=4, k=2, m=1, d=2, dffn=2)
    model = MoEModel.random(cfg)
    model.gate[:] = 0
    W, K = oracle.route(np.ones((1, 2)), model.gate, 2)
    assert K.tolist() == [[0, 1]] and np.allclose(W, 0.25)


@pytest.mark.parametrize("scheme,want", [("bolt", 6), ("batch", 2)])
def test_rotation_count_fig5(scheme, want):
    assert oracle.rotation_count(scheme, 2, 2, 4, 4, 8) == want


def test_rotation_count_batch_full_column():
    assert oracle.rotation_count("batch", 4, 4, 9, 9, 16) == 0


def test_oddeven_counts_agree():
    for p in range(1, 8):
        assert oracle.oddeven_merge_count(2**p) == oracle.oddeven_merge_count_pow2(2**p)
    assert oracle.oddeven_merge_count(1) == 0
    assert oracle.oddeven_merge_count(3) == 3
