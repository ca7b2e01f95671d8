import random

import numpy as np
import pytest

from mpoffload import (
    ConfigError,
    CostModel,
    ExpertKey,
    ModelSpec,
    Policy,
    PolicyWeights,
    RunConfig,
    Simulator,
    TraceMismatchError,
    TraceSpec,
    calibrate_weights,
    generate,
    run,
    simplex_grid,
)
from mpoffload.model import Precision
from conftest import logit_trace, one_hot_logits
from oracles import bytes_closed_form, replay

COST = CostModel()


def no_reuse_trace(n_tokens=6, n_layers=2, n_experts=32, strengths=(8.0, 4.0)):
    """Every token picks a fresh pair of experts in every layer."""
    tokens = []
    for t in range(n_tokens + 1):
        tokens.append([one_hot_logits((2 * t, 2 * t + 1), n_experts, strengths) for _ in range(n_layers)])
    return logit_trace(tokens[1:], n_experts=n_experts, prompt=[tokens[0]])


def cfg_for(trace, **kw):
    m = trace.model
    return RunConfig(model=ModelSpec(m.n_layers, m.n_experts_per_layer, m.top_k, m.d_model), **kw)


def test_warm_cache_latency_closed_form():
    tr = logit_trace([[one_hot_logits((0, 1), 4)] * 4])
    cfg = cfg_for(tr, prefetching=False, dynamic_loading=False, cap_high=16)
    sim = Simulator(tr, cfg)
    for l in range(4):
        for e in range(4):
            sim.cache.insert(ExpertKey(l, e), Precision.HIGH, 0)
    row = sim.step_token(0, 0)
    assert row.stall_ms == 0
    assert row.latency_ms == pytest.approx(4 * (1.95 + 0.05 + 2 * 0.5), abs=1e-9)


def test_cold_cache_adds_one_load_per_expert():
    tr = logit_trace([[one_hot_logits((0, 1), 4)] * 4])
    cfg = cfg_for(tr, prefetching=False, dynamic_loading=False, cap_high=16)
    row = Simulator(tr, cfg).step_token(0, 0)
    assert row.latency_ms == pytest.approx(4 * 3.0 + 4 * 2 * 10.25, abs=1e-9)


def test_high_low_bytes_ratio():
    # logits (8, 4) give weights (0.982, 0.018): t1=0.6 would keep both High, so use (2, 1)
    tr = no_reuse_trace(strengths=(2.0, 1.0))
    base = cfg_for(tr, prefetching=False, cap_high=8, cap_low=8)
    off = run(tr, base.with_(dynamic_loading=False), normalize=False)
    on = run(tr, base, normalize=False)
    assert on.precision_mix["low"] == 50.0
    assert on.bytes_loaded / off.bytes_loaded == (1 + 0.25) / 2


def test_bytes_match_closed_form_without_reuse():
    tr = no_reuse_trace(strengths=(2.0, 1.0))
    cfg = cfg_for(tr, prefetching=False, cap_high=4, cap_low=2)
    assert run(tr, cfg, normalize=False).bytes_loaded == bytes_closed_form(tr, cfg)


def test_empty_decode_has_no_decode_metrics(small_trace):
    tr = generate(TraceSpec(model=small_trace.model, prompt_len=3, decode_len=0, n_sequences=1))
    r = run(tr, RunConfig(model=tr.model), normalize=False)
    assert r.decode_ms_per_token is None and r.tokens_per_s is None
    assert r.prefill_latency_ms > 0


def test_run_is_deterministic(small_trace):
    cfg = RunConfig(model=small_trace.model, cap_high=6, cap_low=4)
    a = run(small_trace, cfg, record_events=True)
    b = run(small_trace, cfg, record_events=True)
    assert a.summary() == b.summary() and a.events == b.events


def test_report_consistency(small_trace):
    r = run(small_trace, RunConfig(model=small_trace.model, cap_high=6, cap_low=4))
    assert sum(r.precision_mix.values()) == pytest.approx(100.0)
    assert r.tokens_per_s == pytest.approx(1000.0 / r.decode_ms_per_token)
    for row in r.token_rows:
        assert row.latency_ms == pytest.approx(row.compute_ms + row.stall_ms)
    assert sum(row.bytes_loaded for row in r.token_rows) <= r.bytes_loaded


def test_weighted_beats_random_on_locality_trace():
    m = ModelSpec(n_layers=8, seed=1)
    tr = generate(TraceSpec(model=m, n_sequences=2, decode_len=24, seed=1))
    r = run(tr, RunConfig(model=m, cap_high=24, cap_low=8))
    assert r.normalized_miss_penalty < 1.0


def test_trace_mismatch_is_reported(small_trace):
    with pytest.raises(TraceMismatchError):
        run(small_trace, RunConfig())


@pytest.mark.parametrize("kw", [
    {"t1": 0.9, "t2": 0.6}, {"cap_high": 1}, {"cap_low": 0}, {"lookahead": -1},
    {"prefetch_precision": "any"},
])
def test_run_config_contract(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_toggles_off_random_is_a_valid_baseline(small_trace):
    cfg = RunConfig(model=small_trace.model, cap_high=6, cap_low=4, dynamic_loading=False,
                    prefetching=False, policy=Policy.RANDOM)
    r = run(small_trace, cfg)
    assert r.normalized_miss_penalty == 1.0
    assert r.precision_mix["high"] == 100.0 and r.loads_low == 0 and r.prefetch_loads == 0


def test_correct_prefetch_shortens_the_stall():
    # layer 1 always wants experts (0, 1) and layer 0's gating input predicts it
    layer = one_hot_logits((0, 1), 4)
    tr = logit_trace([[layer, layer]] * 2)
    cfg = cfg_for(tr, dynamic_loading=False, cap_high=4, lookahead=1)
    r = run(tr, cfg, normalize=False, record_events=True)
    off = run(tr, cfg.with_(prefetching=False), normalize=False)
    assert r.token_rows[0].stall_ms < off.token_rows[0].stall_ms


def test_wide_prefill_streams_through_a_small_pool():
    rng = np.random.default_rng(0)
    prompt = [[rng.standard_normal(8)] for _ in range(12)]
    tr = logit_trace([[rng.standard_normal(8)]], n_experts=8, prompt=prompt)
    r = run(tr, cfg_for(tr, cap_high=2, cap_low=1, prefetching=False), normalize=False)
    assert r.overflow_evictions > 0


@pytest.mark.parametrize("seed", range(8))
def test_event_stream_matches_replay_oracle(seed):
    rng = random.Random(seed)
    m = ModelSpec(n_layers=2, n_experts_per_layer=4, d_model=8, seed=seed)
    tr = generate(TraceSpec(model=m, prompt_len=rng.randint(1, 4), decode_len=rng.randint(10, 40),
                            n_sequences=2, seed=seed))
    cfg = RunConfig(model=m, cap_high=rng.randint(2, 5), cap_low=rng.randint(1, 3),
                    lookahead=rng.randint(1, 2), weights=PolicyWeights(0.4, 0.3, 0.2, 0.1))
    assert Simulator(tr, cfg, record_events=True).run().events == replay(tr, cfg)


def test_simplex_grid():
    assert len(simplex_grid(0.5)) == 10
    assert len(simplex_grid(0.1)) == 286
    assert simplex_grid(0.5)[0] == PolicyWeights(0, 0, 0, 1)
    with pytest.raises(ConfigError):
        simplex_grid(0.3)


def test_calibration_picks_lru_when_lru_is_optimal():
    # found by search over small two-layer top-1 traces: recency is the only
    # signal that avoids evicting the next layer's expert here
    seq = [(0, 1), (0, 3), (2, 0), (3, 2), (2, 0), (1, 0), (2, 2)]
    tokens = [[one_hot_logits((e,), 4, (8.0,)) for e in tok] for tok in seq]
    tr = logit_trace(tokens, n_experts=4, top_k=1)
    cfg = cfg_for(tr, cap_high=4, prefetching=False, dynamic_loading=False)
    best, table = calibrate_weights(tr, cfg, 0.5)
    assert best == PolicyWeights(1, 0, 0, 0)
    pens = sorted(p for _, p in table)
    assert len(table) == 10 and pens[0] < pens[1]
