import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpoffload import CacheState, CapacityError, ConfigError, ExpertKey, Policy, PolicyWeights, Precision, PriorityRecord, priority
from oracles import RefCache, replay_requests

HI, LO = Precision.HIGH, Precision.LOW
A, B, C = ExpertKey(0, 0), ExpertKey(0, 1), ExpertKey(0, 2)


def rec(tokens, **entries):
    r = PriorityRecord(tokens=tokens)
    for name, vals in entries.items():
        getattr(r, name).update(vals)
    return r


def test_fld_same_layer_is_max():
    k = ExpertKey(5, 0)
    assert priority(k, PriorityRecord(), PolicyWeights(0, 0, 0, 1), 5, 32) == 1.0


def test_fld_one_layer_ahead():
    k = ExpertKey(6, 0)
    assert priority(k, PriorityRecord(), PolicyWeights(0, 0, 0, 1), 5, 32) == 0.96875


def test_lru_term():
    k = ExpertKey(0, 0)
    assert priority(k, rec(10, last_used={k: 3}), PolicyWeights(1, 0, 0, 0), 0, 32) == pytest.approx(0.3)


def test_zero_tokens_zeroes_usage_terms():
    k = ExpertKey(0, 0)
    r = rec(0, last_used={k: 3}, freq={k: 3}, high_freq={k: 1})
    assert priority(k, r, PolicyWeights(1 / 3, 1 / 3, 1 / 3, 0), 0, 4) == 0.0


@pytest.mark.parametrize("w", [(0.5, 0.5, 0.5, -0.5), (0.5, 0.5, 0, 0.1), (1, 1, 0, 0)])
def test_weights_must_form_a_simplex_point(w):
    with pytest.raises(ConfigError):
        PolicyWeights(*w)


def test_high_hit_advances_all_records():
    c = CacheState(4, 4, 1)
    c.insert(A, HI, 0, touch=False)
    c.begin_token()
    c.on_use(A, HI)
    r = c.record
    assert (r.last_used[A], r.freq[A], r.high_freq[A]) == (1, 1, 1)


def test_low_hit_leaves_lhu_alone():
    c = CacheState(4, 4, 1)
    c.insert(A, LO, 0, touch=False)
    c.begin_token()
    c.on_use(A, LO)
    assert c.record.freq[A] == 1
    assert c.record.high_freq.get(A, 0) == 0


def test_low_request_served_high_counts_demanded_precision():
    c = CacheState(4, 4, 1)
    c.insert(A, HI, 0, touch=False)
    c.begin_token()
    c.on_use(A, LO)
    assert c.record.high_freq.get(A, 0) == 0


def test_two_hits_one_token():
    c = CacheState(4, 4, 1)
    c.insert(A, HI, 0, touch=False)
    c.begin_token(3)
    c.on_use(A, HI)
    c.on_use(A, HI)
    assert c.record.freq[A] == 2
    assert c.record.last_used[A] == 3


def test_use_of_uncached_expert_is_an_error():
    c = CacheState(4, 4, 1)
    with pytest.raises(KeyError):
        c.on_use(A, HI)


def test_no_eviction_below_capacity():
    c = CacheState(2, 1, 1)
    assert c.insert(A, HI, 0) is None


def test_lru_evicts_oldest():
    c = CacheState(2, 1, 1, PolicyWeights(1, 0, 0, 0))
    c.pools[HI] |= {A, B}
    c.record.tokens = 5
    c.record.last_used.update({A: 1, B: 4})
    assert c.insert(C, HI, 0) == A


def test_masked_member_is_never_evicted():
    c = CacheState(2, 1, 1, PolicyWeights(1, 0, 0, 0))
    c.pools[HI] |= {A, B}
    c.record.tokens = 5
    c.record.last_used.update({A: 4, B: 1})
    c.masked = {B}
    assert c.insert(C, HI, 0) == A


def test_all_protected_raises_capacity_error():
    c = CacheState(1, 1, 1)
    c.pools[HI].add(A)
    c.active = {A}
    with pytest.raises(CapacityError):
        c.insert(B, HI, 0)
    assert c.insert(B, HI, 0, include_active=True) == A


def test_priority_ties_go_to_smallest_key():
    c = CacheState(3, 1, 2, PolicyWeights(0, 1, 0, 0))
    for k in (ExpertKey(1, 0), ExpertKey(0, 3), ExpertKey(0, 2)):
        c.insert(k, HI, 0, touch=False)
    assert c.insert(ExpertKey(1, 1), HI, 0) == ExpertKey(0, 2)


def test_random_policy_is_seeded():
    picks = []
    for _ in range(2):
        c = CacheState(3, 1, 1, policy=Policy.RANDOM, seed=7)
        out = []
        for e in range(10):
            v = c.insert(ExpertKey(0, e), HI, 0)
            if v is not None:
                out.append(v)
        picks.append(out)
    assert picks[0] == picks[1]


def test_reset_zeroes_usage_but_keeps_pools_and_fld():
    c = CacheState(4, 4, 4)
    for k in (A, ExpertKey(2, 1)):
        c.insert(k, HI, 0, touch=False)
    c.begin_token(3)
    c.on_use(A, HI)
    pools = {p: set(v) for p, v in c.pools.items()}
    fld = PolicyWeights(0, 0, 0, 1)
    before = priority(ExpertKey(2, 1), c.record, fld, 1, 4)
    c.reset_sequence()
    assert c.pools == pools
    assert c.record.tokens == 0 and not c.record.freq
    w = PolicyWeights(1 / 3, 1 / 3, 1 / 3, 0)
    assert all(priority(k, c.record, w, 0, 4) == 0.0 for k in (A, ExpertKey(2, 1)))
    assert priority(ExpertKey(2, 1), c.record, fld, 1, 4) == before


@pytest.mark.parametrize("wanted,pool,expected", [
    (LO, HI, HI),
    (HI, LO, None),
    (HI, None, None),
    (LO, LO, LO),
])
def test_lookup(wanted, pool, expected):
    c = CacheState(2, 2, 1)
    if pool is not None:
        c.insert(A, pool, 0)
    assert c.lookup(A, wanted) is expected


def test_corner_policy_overrides_weights():
    c = CacheState(2, 1, 1, PolicyWeights(0, 0, 0, 1), policy=Policy.LRU)
    assert c.weights == PolicyWeights(1, 0, 0, 0)


def random_demands(rng, n_tokens, n_layers, n_experts, top_k=2):
    tokens = []
    for _ in range(n_tokens):
        layers = []
        for l in range(n_layers):
            picks = rng.sample(range(n_experts), top_k)
            layers.append([(ExpertKey(l, e), HI if i == 0 or rng.random() < 0.5 else LO) for i, e in enumerate(picks)])
        tokens.append(layers)
    return tokens


@pytest.mark.parametrize("policy", ["lru", "lfu", "lhu", "fld"])
def test_corner_weights_match_reference_policy(policy):
    rng = random.Random(policy)
    for _ in range(10):
        n_layers, n_experts = rng.randint(2, 4), rng.randint(4, 8)
        demands = random_demands(rng, rng.randint(50, 120), n_layers, n_experts)
        caps = (rng.randint(2, 6), rng.randint(2, 4))
        starts = {0, len(demands) // 2}
        lib = CacheState(*caps, n_layers, PolicyWeights.corner(Policy(policy)))
        ref = RefCache(policy, *caps, n_layers)
        assert replay_requests(lib, demands, n_layers, starts) == replay_requests(ref, demands, n_layers, starts)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 6), st.integers(2, 4))
def test_records_and_pools_stay_within_bounds(seed, cap_high, cap_low):
    rng = random.Random(seed)
    n_layers = 3
    c = CacheState(cap_high, cap_low, n_layers, PolicyWeights(0.4, 0.3, 0.2, 0.1))
    replay_requests(c, random_demands(rng, 30, n_layers, 5), n_layers, {0, 15})
    r = c.record
    assert len(c.pools[HI]) <= cap_high and len(c.pools[LO]) <= cap_low
    for k, f in r.freq.items():
        assert 0 <= r.last_used[k] <= r.tokens
        assert r.high_freq.get(k, 0) <= f
