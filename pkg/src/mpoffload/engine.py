"""Trace-driven simulation of mixed-precision expert offloading.

Each layer of each token runs: attention + gate compute, precision
classification, lookahead prefetch, on-demand loads, a stall until every
on-demand expert has landed, then expert compute.  Prefill handles all
prompt tokens of a sequence in one pass per layer over the union of their
experts.  Time is abstract milliseconds priced by a :class:`CostModel`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .cache import CacheState, CapacityError, Policy, PolicyWeights
from .gating import Decision, GateOutcome, all_high, classify_precision, unimportance_scores
from .loader import Completion, LoadTask, TaskKind, TransferChannel, enqueue_prefetch
from .model import ConfigError, CostModel, ExpertKey, ModelSpec, Precision, miss_penalty
from .predictor import LookaheadPrediction
from .tracegen import Trace


class TraceMismatchError(ValueError):
    """The trace does not fit the model the configuration describes."""


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    cost: CostModel = field(default_factory=CostModel)
    t1: float = 0.6
    t2: float = 0.9
    weights: PolicyWeights = field(default_factory=PolicyWeights)
    cap_high: int = 48
    cap_low: int = 16
    lookahead: int = 1
    dynamic_loading: bool = True
    prefetching: bool = True
    policy: Policy = Policy.WEIGHTED
    sequence_reset: bool = True
    # "both": fetch Low then High for absent predictions; "scored": only the predicted precision
    prefetch_precision: str = "both"

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        if self.prefetch_precision not in ("both", "scored"):
            raise ConfigError(f"prefetch_precision must be 'both' or 'scored', got {self.prefetch_precision!r}")
        if not 0.0 <= self.t1 <= self.t2 <= 1.0:
            raise ConfigError(f"thresholds must satisfy 0 <= t1 <= t2 <= 1, got {self.t1}, {self.t2}")
        if self.lookahead < 0:
            raise ConfigError("lookahead must be >= 0")
        if self.cap_high < self.model.top_k:
            raise ConfigError(
                f"cap_high={self.cap_high} cannot hold the {self.model.top_k} experts of one layer"
            )
        if self.dynamic_loading and self.model.top_k > 1 and self.cap_low < 1:
            raise ConfigError("dynamic loading needs a low-precision pool (cap_low >= 1)")

    @property
    def predicting(self) -> bool:
        return self.prefetching and self.lookahead > 0

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


@dataclass
class LayerRow:
    seq: int
    phase: str
    token: int
    layer: int
    start_ms: float
    attn_gate_ms: float
    stall_ms: float
    expert_ms: float

    @property
    def duration_ms(self) -> float:
        return self.attn_gate_ms + self.stall_ms + self.expert_ms


@dataclass
class TokenRow:
    seq: int
    phase: str
    token: int
    latency_ms: float = 0.0
    compute_ms: float = 0.0
    stall_ms: float = 0.0
    n_high: int = 0
    n_low: int = 0
    n_skip: int = 0
    misses: int = 0
    miss_penalty: float = 0.0
    bytes_loaded: float = 0.0


@dataclass
class SimReport:
    prefill_latency_ms: float
    prefill_latency_total_ms: float
    decode_ms_per_token: float | None
    tokens_per_s: float | None
    total_miss_penalty: float
    normalized_miss_penalty: float | None
    high_hit_ratio: float | None
    low_hit_ratio: float | None
    hit_ratio: float | None
    bytes_loaded: float
    loads_high: int
    loads_low: int
    prefetch_loads: int
    dropped_prefetches: int
    mask_releases: int
    overflow_evictions: int
    precision_mix: dict
    token_rows: list = field(default_factory=list, repr=False)
    layer_rows: list = field(default_factory=list, repr=False)
    events: list = field(default_factory=list, repr=False)

    def summary(self) -> dict[str, Any]:
        keys = [
            "prefill_latency_ms", "prefill_latency_total_ms", "decode_ms_per_token",
            "tokens_per_s", "total_miss_penalty", "normalized_miss_penalty",
            "high_hit_ratio", "low_hit_ratio", "hit_ratio", "bytes_loaded",
            "loads_high", "loads_low", "prefetch_loads", "dropped_prefetches",
            "mask_releases", "overflow_evictions", "precision_mix",
        ]
        return {k: getattr(self, k) for k in keys}


def _max_precision(a: Precision | None, b: Precision | None) -> Precision | None:
    if a is Precision.HIGH or b is Precision.HIGH:
        return Precision.HIGH
    return a or b


class Simulator:
    """One deterministic simulation of one trace under one configuration."""

    def __init__(self, trace: Trace, config: RunConfig, record_events: bool = False):
        check_compatible(trace, config)
        self.trace = trace
        self.config = config
        self.cost = config.cost
        self.model = config.model
        self.record_events = record_events
        self.outcomes = trace.gate_outcomes(config.model.top_k)
        self.lookahead = (
            trace.lookahead_outcomes(config.model.top_k, config.lookahead)
            if config.predicting
            else None
        )
        self.cache = CacheState(
            config.cap_high, config.cap_low, config.model.n_layers,
            config.weights, config.policy, seed=config.model.seed,
        )
        self.channel = TransferChannel(self.cost, self._on_complete, self._should_drop)
        self.clock = 0.0
        self.layer = 0
        self.pos_base = 0
        self.masks: dict[int, frozenset] = {}
        self.events: list = []
        self.layer_rows: list[LayerRow] = []
        self.token_rows: list[TokenRow] = []
        self.mask_releases = 0
        self.overflow_evictions = 0
        self._row: TokenRow | None = None
        self._requests = {Precision.HIGH: 0, Precision.LOW: 0}
        self._hits = {Precision.HIGH: 0, Precision.LOW: 0}

    # -- channel callbacks -------------------------------------------------

    def _serves(self, task: LoadTask) -> bool:
        c = self.cache
        return c.holds(task.key, task.precision) or c.holds(task.key, Precision.HIGH)

    def _should_drop(self, task: LoadTask) -> bool:
        return self._serves(task)

    def _on_complete(self, c: Completion) -> None:
        task = c.task
        if self.record_events:
            self.events.append(
                ("load", c.start, c.finish, task.key.layer, task.key.expert,
                 task.precision.value, task.kind.value)
            )
        if self._row is not None:
            self._row.bytes_loaded += self.cost.expert_bytes(task.precision)
        if self.cache.holds(task.key, task.precision):
            return
        try:
            evicted = self.cache.insert(task.key, task.precision, self.layer, touch=False)
        except CapacityError:
            if task.kind is TaskKind.PREFETCH:
                if self.record_events:
                    self.events.append(
                        ("discard", c.finish, task.key.layer, task.key.expert, task.precision.value)
                    )
                return
            # an on-demand expert must land: shed lookahead masks, then retry
            self.masks.clear()
            self.cache.masked = set()
            self.mask_releases += 1
            try:
                evicted = self.cache.insert(task.key, task.precision, self.layer, touch=False)
            except CapacityError:
                # the layer needs more experts than the pool holds (wide prefill):
                # stream them, displacing an already-landed active expert
                evicted = self.cache.insert(
                    task.key, task.precision, self.layer, touch=False, include_active=True
                )
                self.overflow_evictions += 1
        if evicted is not None and self.record_events:
            self.events.append(
                ("evict", c.finish, task.precision.value, evicted.layer, evicted.expert)
            )

    # -- layer execution ---------------------------------------------------

    def _advance(self, dt: float) -> None:
        self.clock += dt
        self.channel.step(self.clock)

    def _refresh_masks(self, pos: int) -> None:
        self.masks = {p: keys for p, keys in self.masks.items() if p >= pos}
        self.cache.masked = set().union(*self.masks.values()) if self.masks else set()

    def _predict(self, layer: int, rows: list[int], block: str, seq: int) -> LookaheadPrediction:
        ahead = self.lookahead[seq][block]
        outcomes = tuple(
            tuple(ahead[r][layer][j] for r in rows) for j in range(len(ahead[rows[0]][layer]))
        )
        pred = LookaheadPrediction(layer, outcomes)
        masked = set()
        chosen = None
        for target in pred.layers:
            keys = pred.predicted_keys(target)
            masked.update(keys)
            self.masks[self.pos_base + target] = frozenset(keys)
            if any(not self.cache.is_resident(k) for k in keys):
                chosen = target
                break
        return LookaheadPrediction(layer, outcomes, chosen, frozenset(masked))

    def _run_layer(self, layer: int, rows: list[int], block: str, seq: int) -> None:
        cfg = self.config
        cache = self.cache
        row = self._row
        pos = self.pos_base + layer
        self.layer = layer
        self.channel.front = pos
        cache.active = set()
        self._refresh_masks(pos)
        start = self.clock
        attn_gate = self.cost.attn_compute_ms + self.cost.gate_compute_ms
        self._advance(self.cost.attn_compute_ms)
        self._advance(self.cost.gate_compute_ms)

        # demanded precision per expert, max over rows; first-seen rank order
        demand: dict[ExpertKey, Precision | None] = {}
        uses: list[tuple[ExpertKey, Precision]] = []
        for r in rows:
            g: GateOutcome = self.outcomes[seq][block][r][layer]
            if cfg.dynamic_loading:
                decision = classify_precision(unimportance_scores(g), cfg.t1, cfg.t2)
            else:
                decision = all_high(g)
            for key, d in zip(g.keys, decision):
                prec = d.precision
                demand[key] = _max_precision(demand.get(key), prec)
                if d is Decision.HIGH:
                    row.n_high += 1
                elif d is Decision.LOW:
                    row.n_low += 1
                else:
                    row.n_skip += 1
                if prec is not None:
                    uses.append((key, prec))
        needed = [(k, p) for k, p in demand.items() if p is not None]
        cache.active = {k for k, _ in needed}

        if cfg.predicting:
            pred = self._predict(layer, rows, block, seq)
            cache.masked = set().union(*self.masks.values())
            thresholds = None
            if cfg.prefetch_precision == "scored":
                thresholds = (cfg.t1, cfg.t2) if cfg.dynamic_loading else (1.0, 1.0)
            self.channel.submit_all(enqueue_prefetch(pred, cache, self.clock, self.pos_base, thresholds))

        awaited = set()
        for key, wanted in needed:
            self._requests[wanted] += 1
            if cache.lookup(key, wanted) is not None:
                self._hits[wanted] += 1
                continue
            row.misses += 1
            row.miss_penalty += miss_penalty(wanted, self.cost)
            carrier = self.channel.submit(
                LoadTask(key, wanted, TaskKind.ON_DEMAND, self.clock, pos)
            )
            awaited.add(carrier.ident)

        before = self.clock
        done, _ = self.channel.wait_for(awaited, self.clock)
        stall = done - before
        self.clock = done
        if self.record_events and awaited:
            self.events.append(("stall", seq, block, row.token, layer, stall))

        for key, prec in uses:
            if cache.lookup(key, prec) is None:
                cache.record.touch(key, prec)  # streamed through and already displaced
            else:
                cache.on_use(key, prec)

        expert_ms = self.cost.expert_compute_ms * len(needed)
        self._advance(expert_ms)
        lr = LayerRow(seq, block, row.token, layer, start, attn_gate, stall, expert_ms)
        self.layer_rows.append(lr)
        row.compute_ms += attn_gate + expert_ms
        row.stall_ms += stall
        row.latency_ms += lr.duration_ms

    def _pass(self, rows: list[int], block: str, seq: int, token: int) -> TokenRow:
        self._row = TokenRow(seq, "prefill" if block == "prompt" else "decode", token)
        self.cache.begin_token(len(rows))
        for layer in range(self.model.n_layers):
            self._run_layer(layer, rows, block, seq)
        self.pos_base += self.model.n_layers
        self.token_rows.append(self._row)
        row, self._row = self._row, None
        return row

    def step_token(self, seq: int, index: int) -> TokenRow:
        """Run decode token ``index`` of sequence ``seq`` through every layer."""
        return self._pass([index], "decode", seq, index)

    def prefill(self, seq: int) -> TokenRow:
        n = len(self.trace.sequences[seq].prompt)
        return self._pass(list(range(n)), "prompt", seq, 0)

    def run(self) -> SimReport:
        for s, sq in enumerate(self.trace.sequences):
            if s == 0 or self.config.sequence_reset:
                self.cache.reset_sequence()
            self.prefill(s)
            for i in range(len(sq.decode)):
                self.step_token(s, i)
        return self._report()

    def _report(self) -> SimReport:
        pre = [r for r in self.token_rows if r.phase == "prefill"]
        dec = [r for r in self.token_rows if r.phase == "decode"]
        decode_ms = sum(r.latency_ms for r in dec) / len(dec) if dec else None
        tps = 1000.0 / decode_ms if decode_ms else None
        comps = self.channel.completions
        n_high = sum(r.n_high for r in self.token_rows)
        n_low = sum(r.n_low for r in self.token_rows)
        n_skip = sum(r.n_skip for r in self.token_rows)
        n_sel = n_high + n_low + n_skip
        req = self._requests
        hits = self._hits

        def ratio(a, b):
            return a / b if b else None

        return SimReport(
            prefill_latency_ms=sum(r.latency_ms for r in pre) / len(pre) if pre else 0.0,
            prefill_latency_total_ms=sum(r.latency_ms for r in pre),
            decode_ms_per_token=decode_ms,
            tokens_per_s=tps,
            total_miss_penalty=sum(r.miss_penalty for r in self.token_rows),
            normalized_miss_penalty=None,
            high_hit_ratio=ratio(hits[Precision.HIGH], req[Precision.HIGH]),
            low_hit_ratio=ratio(hits[Precision.LOW], req[Precision.LOW]),
            hit_ratio=ratio(sum(hits.values()), sum(req.values())),
            bytes_loaded=self.channel.bytes_moved,
            loads_high=sum(1 for c in comps if c.task.precision is Precision.HIGH),
            loads_low=sum(1 for c in comps if c.task.precision is Precision.LOW),
            prefetch_loads=sum(1 for c in comps if c.task.kind is TaskKind.PREFETCH),
            dropped_prefetches=len(self.channel.dropped),
            mask_releases=self.mask_releases,
            overflow_evictions=self.overflow_evictions,
            precision_mix={
                "high": 100.0 * n_high / n_sel if n_sel else 0.0,
                "low": 100.0 * n_low / n_sel if n_sel else 0.0,
                "skip": 100.0 * n_skip / n_sel if n_sel else 0.0,
            },
            token_rows=list(self.token_rows),
            layer_rows=list(self.layer_rows),
            events=list(self.events),
        )


def check_compatible(trace: Trace, config: RunConfig) -> None:
    m, t = config.model, trace.model
    if (m.n_layers, m.n_experts_per_layer, m.d_model) != (t.n_layers, t.n_experts_per_layer, t.d_model):
        raise TraceMismatchError(
            f"trace model (layers={t.n_layers}, experts={t.n_experts_per_layer}, d={t.d_model}) "
            f"does not match config (layers={m.n_layers}, experts={m.n_experts_per_layer}, d={m.d_model})"
        )
    for i, s in enumerate(trace.sequences):
        if len(s.prompt) < 1:
            raise TraceMismatchError(f"sequence {i} has no prompt tokens")


def run(trace: Trace, config: RunConfig, normalize: bool = True, record_events: bool = False) -> SimReport:
    """Simulate ``trace`` under ``config``.

    With ``normalize`` the miss penalty is also reported relative to a
    random-replacement run on the same trace and configuration.
    """
    report = Simulator(trace, config, record_events=record_events).run()
    if normalize:
        if config.policy is Policy.RANDOM:
            base = report.total_miss_penalty
        else:
            base = Simulator(trace, config.with_(policy=Policy.RANDOM)).run().total_miss_penalty
        report.normalized_miss_penalty = report.total_miss_penalty / base if base > 0 else None
    return report


def simplex_grid(step: float) -> list[PolicyWeights]:
    """Every weight vector of non-negative multiples of ``step`` summing to 1, lexicographic."""
    n = round(1.0 / step)
    if n < 1 or not math.isclose(n * step, 1.0, rel_tol=0.0, abs_tol=1e-9):
        raise ConfigError(f"grid_step {step} does not divide 1 evenly")
    grid = []
    for a, b, c in itertools.product(range(n + 1), repeat=3):
        d = n - a - b - c
        if d >= 0:
            grid.append(PolicyWeights(a / n, b / n, c / n, d / n))
    return grid


def calibrate_weights(
    trace: Trace, config: RunConfig, grid_step: float = 0.1
) -> tuple[PolicyWeights, list[tuple[PolicyWeights, float]]]:
    """Grid-search the policy weights that minimize total miss penalty on ``trace``.

    Returns the best vector (lexicographically smallest among ties) and the
    full (weights, penalty) table in grid order.
    """
    table = []
    best = None
    for w in simplex_grid(grid_step):
        cfg = config.with_(weights=w, policy=Policy.WEIGHTED)
        pen = Simulator(trace, cfg).run().total_miss_penalty
        table.append((w, pen))
        if best is None or pen < best[1]:
            best = (w, pen)
    return best[0], table
