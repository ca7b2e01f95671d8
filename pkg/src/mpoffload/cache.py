"""Mixed-precision expert cache with weighted LRU/LFU/LHU/FLD replacement.

Two pools hold high- and low-precision copies independently; an expert may
sit in both.  Eviction picks the member with the lowest priority::

    p = w_lru * R/T + w_lfu * F/T + w_lhu * H/T + w_fld * (1 - d/n_layers)

where R is the token index of last use, F the use count, H the count of uses
that demanded high precision, T the current token number and d the forward
layer distance from the executing layer to the expert's layer.  R, F, H and
T are per-sequence and cleared by :meth:`CacheState.reset_sequence`.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field

from .model import ConfigError, ExpertKey, Precision


class CapacityError(RuntimeError):
    """Every member of a full pool is protected from eviction."""


class Policy(str, enum.Enum):
    RANDOM = "random"
    LRU = "lru"
    LFU = "lfu"
    LHU = "lhu"
    FLD = "fld"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class PolicyWeights:
    lru: float = 0.25
    lfu: float = 0.25
    lhu: float = 0.25
    fld: float = 0.25

    def __post_init__(self):
        vals = self.as_tuple()
        if any(v < 0 for v in vals):
            raise ConfigError(f"policy weights must be non-negative, got {vals}")
        if not math.isclose(sum(vals), 1.0, rel_tol=0.0, abs_tol=1e-9):
            raise ConfigError(f"policy weights must sum to 1, got {sum(vals)!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lru, self.lfu, self.lhu, self.fld)

    @classmethod
    def corner(cls, policy: Policy) -> "PolicyWeights":
        idx = {Policy.LRU: 0, Policy.LFU: 1, Policy.LHU: 2, Policy.FLD: 3}[Policy(policy)]
        w = [0.0] * 4
        w[idx] = 1.0
        return cls(*w)


@dataclass
class PriorityRecord:
    last_used: dict = field(default_factory=dict)
    freq: dict = field(default_factory=dict)
    high_freq: dict = field(default_factory=dict)
    tokens: int = 0

    def reset(self) -> None:
        self.last_used.clear()
        self.freq.clear()
        self.high_freq.clear()
        self.tokens = 0

    def touch(self, key: ExpertKey, precision: Precision) -> None:
        self.last_used[key] = self.tokens
        self.freq[key] = self.freq.get(key, 0) + 1
        if precision is Precision.HIGH:
            self.high_freq[key] = self.high_freq.get(key, 0) + 1


def layer_distance(expert_layer: int, current_layer: int, n_layers: int) -> int:
    return (expert_layer - current_layer + n_layers) % n_layers


def priority(
    key: ExpertKey,
    record: PriorityRecord,
    w: PolicyWeights,
    current_layer: int,
    n_layers: int,
) -> float:
    T = record.tokens
    if T > 0:
        lru = record.last_used.get(key, 0) / T
        lfu = record.freq.get(key, 0) / T
        lhu = record.high_freq.get(key, 0) / T
    else:
        lru = lfu = lhu = 0.0
    fld = 1.0 - layer_distance(key.layer, current_layer, n_layers) / n_layers
    return w.lru * lru + w.lfu * lfu + w.lhu * lhu + w.fld * fld


class CacheState:
    """Both expert pools, the priority record, and the eviction guards.

    ``masked`` holds predicted experts; ``active`` holds the experts the
    executing layer is computing with.  Neither is ever evicted.
    """

    def __init__(
        self,
        cap_high: int,
        cap_low: int,
        n_layers: int,
        weights: PolicyWeights | None = None,
        policy: Policy | str = Policy.WEIGHTED,
        seed: int = 0,
    ):
        if cap_high < 0 or cap_low < 0:
            raise ConfigError("cache capacities must be non-negative")
        self.capacity = {Precision.HIGH: cap_high, Precision.LOW: cap_low}
        self.pools: dict[Precision, set] = {Precision.HIGH: set(), Precision.LOW: set()}
        self.n_layers = n_layers
        self.policy = Policy(policy)
        if self.policy in (Policy.LRU, Policy.LFU, Policy.LHU, Policy.FLD):
            weights = PolicyWeights.corner(self.policy)
        self.weights = weights or PolicyWeights()
        self.record = PriorityRecord()
        self.masked: set = set()
        self.active: set = set()
        self._rng = random.Random(seed)

    def __repr__(self):
        return (
            f"CacheState(high={sorted(self.pools[Precision.HIGH])}, "
            f"low={sorted(self.pools[Precision.LOW])}, T={self.record.tokens})"
        )

    def holds(self, key: ExpertKey, precision: Precision) -> bool:
        return key in self.pools[precision]

    def is_resident(self, key: ExpertKey) -> bool:
        return key in self.pools[Precision.HIGH] or key in self.pools[Precision.LOW]

    def lookup(self, key: ExpertKey, wanted: Precision) -> Precision | None:
        """Precision that would serve the request, or None on a miss.

        A cached high-precision copy also serves a low-precision request.
        """
        if key in self.pools[Precision.HIGH]:
            return Precision.HIGH
        if wanted is Precision.LOW and key in self.pools[Precision.LOW]:
            return Precision.LOW
        return None

    def begin_token(self, n: int = 1) -> None:
        self.record.tokens += n

    def on_use(self, key: ExpertKey, precision: Precision) -> None:
        """Record a use; ``precision`` is the demanded precision."""
        if self.lookup(key, precision) is None:
            raise KeyError(f"{key} is not cached at {precision.value} precision")
        self.record.touch(key, precision)

    def priority(self, key: ExpertKey, current_layer: int) -> float:
        return priority(key, self.record, self.weights, current_layer, self.n_layers)

    def eligible(self, precision: Precision, include_active: bool = False) -> list:
        return sorted(
            k for k in self.pools[precision]
            if k not in self.masked and (include_active or k not in self.active)
        )

    def choose_victim(
        self, precision: Precision, current_layer: int, include_active: bool = False
    ) -> ExpertKey:
        candidates = self.eligible(precision, include_active)
        if not candidates:
            raise CapacityError(
                f"{precision.value} pool (capacity {self.capacity[precision]}) has no evictable member"
            )
        if self.policy is Policy.RANDOM:
            return self._rng.choice(candidates)
        # candidates are sorted, so min() keeps the lexicographically smallest among ties
        return min(candidates, key=lambda k: self.priority(k, current_layer))

    def insert(
        self,
        key: ExpertKey,
        precision: Precision,
        current_layer: int,
        touch: bool = True,
        include_active: bool = False,
    ) -> ExpertKey | None:
        """Place ``key`` in the pool for ``precision``; returns the evicted key if any.

        ``include_active`` lets the executing layer's own experts be evicted,
        for layers that need more experts than the pool holds.
        """
        pool = self.pools[precision]
        if key in pool:
            raise KeyError(f"{key} already cached at {precision.value} precision")
        evicted = None
        if len(pool) >= self.capacity[precision]:
            evicted = self.choose_victim(precision, current_layer, include_active)
            pool.remove(evicted)
        pool.add(key)
        if touch:
            self.record.touch(key, precision)
        return evicted

    def reset_sequence(self) -> None:
        self.record.reset()
