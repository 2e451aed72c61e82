import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docfuse import memory as M
from docfuse.errors import ConfigError, InfeasibleError
from docfuse.memory import MemConfig, estimate_flops, estimate_memory, max_context, sweep


def test_defaults_are_t5_large_like():
    cfg = MemConfig()
    assert (cfg.d, cfg.layers_enc, cfg.layers_dec, cfg.c) == (1024, 24, 24, 1024)
    assert cfg.budget_bytes == 24 * 2 ** 30


def test_mode_rejects_foreign_toggles():
    with pytest.raises(ConfigError):
        MemConfig(mode="inference", nested_checkpointing=True)
    with pytest.raises(ConfigError):
        MemConfig(mode="training", no_cross_kv_cache=True)
    with pytest.raises(ConfigError):
        MemConfig().with_toggles("warp_drive")


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5000), st.integers(2, 64), st.data())
def test_chunk_lengths_closed_form(C, c, data):
    l = data.draw(st.integers(0, c - 2))
    o = data.draw(st.integers(0, c - l - 1))
    cfg = MemConfig(c=c, l=l, o=o, sparsity=True)
    assert M._check_plan(C, cfg)


def test_floor_case_weights_dominate():
    br = estimate_memory(1, MemConfig())
    assert br["weights"] > 0.9 * br["total"]
    tr = estimate_memory(1, MemConfig(mode="training"))
    assert tr["weights"] + tr["gradients"] + tr["optimizer"] > 0.9 * tr["total"]


def test_sparse_attention_linear_in_length():
    cfg = MemConfig(mode="training", sparsity=True)
    a = estimate_memory(8 * 1024, cfg)["attention"]
    b = estimate_memory(16 * 1024, cfg)["attention"]
    assert b == 2 * a


def test_sparse_attention_far_below_dense():
    dense = estimate_memory(9000, MemConfig(mode="training"))["attention"]
    sparse = estimate_memory(9000, MemConfig(mode="training", sparsity=True))["attention"]
    assert sparse < dense / 8


def _all_configs(mode):
    names = M.INFERENCE_TOGGLES if mode == "inference" else M.TRAINING_TOGGLES
    for bits in itertools.product((False, True), repeat=len(names)):
        yield MemConfig(mode=mode, **dict(zip(names, bits)))


@pytest.mark.parametrize("mode", ["inference", "training"])
def test_total_strictly_increasing(mode):
    Cs = [1, 2, 3, 100, 1023, 1024, 1025, 5000, 65536, 200_000]
    for cfg in _all_configs(mode):
        totals = [estimate_memory(C, cfg)["total"] for C in Cs]
        assert all(b > a for a, b in zip(totals, totals[1:])), cfg.toggles


@pytest.mark.parametrize("mode", ["inference", "training"])
def test_single_toggle_monotonicity(mode):
    names = M.INFERENCE_TOGGLES if mode == "inference" else M.TRAINING_TOGGLES
    cache = {}

    def mc(cfg):
        key = tuple(cfg.toggles)
        if key not in cache:
            cache[key] = max_context(cfg)
        return cache[key]

    for cfg in _all_configs(mode):
        for t in names:
            if not getattr(cfg, t):
                assert mc(cfg.with_toggles(t)) >= mc(cfg), (cfg.toggles, t)


def test_budget_boundary():
    cfg = MemConfig()
    K = 5000
    exact = MemConfig(budget_bytes=int(estimate_memory(K, cfg)["total"]))
    assert max_context(exact) == K


def test_infeasible_budget():
    with pytest.raises(InfeasibleError):
        max_context(MemConfig(budget_bytes=1000))


def test_sweep_shape_and_sparsity_gain():
    inf = sweep(MemConfig())
    vals = [n for _, n in inf]
    assert [name for name, _ in inf][0] == "vanilla"
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[1] / vals[0] >= 5
    gains = [b / a for a, b in zip(vals, vals[1:])]
    assert gains[0] == max(gains)
    tr = [n for _, n in sweep(MemConfig(mode="training"))]
    assert all(b >= a for a, b in zip(tr, tr[1:]))


def test_flops_linear_with_sparsity_quadratic_without():
    sparse, dense = MemConfig(sparsity=True), MemConfig()
    C = 65536
    f = lambda n, cfg: estimate_flops(n, 1, cfg)["total"]  # noqa: E731
    r2, r4 = f(2 * C, sparse) / f(C, sparse), f(4 * C, sparse) / f(C, sparse)
    assert abs(r2 / 2 - 1) < 0.1 and abs(r4 / 4 - 1) < 0.1
    d2, d4 = f(2 * C, dense) / f(C, dense), f(4 * C, dense) / f(C, dense)
    assert abs(d2 / 4 - 1) < 0.1 and abs(d4 / 16 - 1) < 0.1


def test_flops_full_scale_sanity():
    cfg = MemConfig(sparsity=True)
    ratio = estimate_flops(512 * 1024, 128, cfg)["total"] / estimate_flops(4 * 1024, 128, cfg)["total"]
    assert ratio < 130


def test_flops_kv_recompute_trade():
    base = estimate_flops(10_000, 16, MemConfig(sparsity=True))
    nokv = estimate_flops(10_000, 16, MemConfig(sparsity=True, no_cross_kv_cache=True))
    assert nokv["cross_kv_projection"] == 16 * base["cross_kv_projection"]
    assert estimate_flops(10_000, 1, MemConfig())["decoder"] < base["decoder"]


def test_random_chunks_cap_encoded_length():
    cfg = MemConfig(mode="training", sparsity=True, random_chunks=True, max_chunks=4)
    assert M.encoded_length(10 ** 6, cfg) == 4 * 1024
    a, b = estimate_memory(10 ** 5, cfg), estimate_memory(10 ** 6, cfg)
    assert a["attention"] == b["attention"] and b["inputs"] == 10 * a["inputs"]


def test_mixed_precision_halves_float_terms():
    a = estimate_memory(4096, MemConfig(mode="training"))
    b = estimate_memory(4096, MemConfig(mode="training", mixed_precision=True))
    for k in ("weights", "activations", "attention", "gradients", "optimizer", "decoder"):
        assert b[k] * 2 == a[k]
    assert b["inputs"] == a["inputs"]
