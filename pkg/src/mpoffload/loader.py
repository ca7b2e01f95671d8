"""Load-task generation and the single non-preemptive transfer channel."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

from .cache import CacheState
from .gating import Decision, GateOutcome, classify_precision, unimportance_scores
from .model import CostModel, ExpertKey, Precision, load_time
from .predictor import LookaheadPrediction


class TaskKind(str, enum.Enum):
    ON_DEMAND = "on_demand"
    PREFETCH = "prefetch"


@dataclass(frozen=True)
class LoadTask:
    key: ExpertKey
    precision: Precision
    kind: TaskKind
    enqueue_time: float = 0.0
    # execution position (token * n_layers + layer) the task serves; prefetches
    # whose position the execution front has passed are dropped at dequeue
    target_pos: int = 0

    @property
    def ident(self) -> tuple[ExpertKey, Precision]:
        return (self.key, self.precision)


def on_miss_tasks(
    g: GateOutcome,
    decision: Sequence[Decision],
    cache: CacheState,
    now: float = 0.0,
    target_pos: int = 0,
) -> list[LoadTask]:
    """On-demand loads for the selected experts the cache cannot serve, in rank order."""
    tasks = []
    for (key, _), d in zip(g.ranked, decision):
        wanted = d.precision
        if wanted is None or cache.lookup(key, wanted) is not None:
            continue
        tasks.append(LoadTask(key, wanted, TaskKind.ON_DEMAND, now, target_pos))
    return tasks


def enqueue_prefetch(
    pred: LookaheadPrediction,
    cache: CacheState,
    now: float = 0.0,
    base_pos: int = 0,
    thresholds: tuple[float, float] | None = None,
) -> list[LoadTask]:
    """Prefetches for the chosen lookahead layer.

    By default an expert with neither copy cached gets a low-precision load
    followed by a high-precision one, so a misprediction blocks the link for
    the short transfer first.  With ``thresholds`` (t1, t2) the predicted
    outcome is classified instead and only the precision it calls for is
    fetched (nothing for a predicted skip).  ``base_pos`` is the execution
    position of layer 0 of the current token.
    """
    layer = pred.chosen_prefetch_layer
    if layer is None:
        return []
    tasks = []
    if thresholds is not None:
        want: dict = {}
        for g in pred.outcomes[pred.layers.index(layer)]:
            for key, d in zip(g.keys, classify_precision(unimportance_scores(g), *thresholds)):
                p = d.precision
                if p is not None and want.get(key) is not Precision.HIGH:
                    want[key] = p
        for key, prec in want.items():
            if cache.lookup(key, prec) is None:
                tasks.append(LoadTask(key, prec, TaskKind.PREFETCH, now, base_pos + layer))
        return tasks
    for key in pred.predicted_keys(layer):
        if cache.holds(key, Precision.HIGH):
            continue
        wanted = [Precision.HIGH] if cache.holds(key, Precision.LOW) else [Precision.LOW, Precision.HIGH]
        for prec in wanted:
            tasks.append(LoadTask(key, prec, TaskKind.PREFETCH, now, base_pos + layer))
    return tasks


@dataclass(frozen=True)
class Completion:
    task: LoadTask
    start: float
    finish: float


class TransferChannel:
    """One link, one transfer at a time, never interrupted.

    On-demand tasks are served before any queued prefetch but never displace
    the transfer already in flight.  ``on_complete`` fires in completion order
    and ``should_drop`` may veto a prefetch when it reaches the head of the queue.
    """

    def __init__(
        self,
        cost: CostModel,
        on_complete: Callable[[Completion], None] | None = None,
        should_drop: Callable[[LoadTask], bool] | None = None,
    ):
        self.cost = cost
        self.on_complete = on_complete
        self.should_drop = should_drop
        self.busy_until = 0.0
        self.in_flight: LoadTask | None = None
        self._start = 0.0
        self._finish = 0.0
        self.on_demand: deque[LoadTask] = deque()
        self.prefetch: deque[LoadTask] = deque()
        self.front = 0
        self.completions: list[Completion] = []
        self.dropped: list[tuple[LoadTask, float]] = []

    @property
    def queue(self) -> list[LoadTask]:
        return list(self.on_demand) + list(self.prefetch)

    @property
    def bytes_moved(self) -> float:
        return sum(self.cost.expert_bytes(c.task.precision) for c in self.completions)

    @property
    def busy_ms(self) -> float:
        return sum(c.finish - c.start for c in self.completions)

    def pending(self, key: ExpertKey, precision: Precision) -> LoadTask | None:
        if self.in_flight is not None and self.in_flight.ident == (key, precision):
            return self.in_flight
        for t in self.on_demand:
            if t.ident == (key, precision):
                return t
        for t in self.prefetch:
            if t.ident == (key, precision):
                return t
        return None

    def submit(self, task: LoadTask) -> LoadTask:
        """Queue a task, coalescing with an equivalent queued or in-flight one.

        Returns the task that will actually carry the transfer.  A queued
        prefetch that an on-demand request duplicates is promoted, and a
        low-precision demand rides on an in-flight high-precision copy.
        """
        fl = self.in_flight
        if fl is not None and fl.key == task.key and (
            fl.precision == task.precision
            or (task.kind is TaskKind.ON_DEMAND and task.precision is Precision.LOW)
        ):
            return fl
        for t in self.on_demand:
            if t.ident == task.ident:
                return t
        for t in self.prefetch:
            if t.ident == task.ident:
                if task.kind is TaskKind.PREFETCH:
                    return t
                self.prefetch.remove(t)
                break
        if task.kind is TaskKind.ON_DEMAND:
            self.on_demand.append(task)
        else:
            self.prefetch.append(task)
        return task

    def submit_all(self, tasks: Iterable[LoadTask]) -> list[LoadTask]:
        return [self.submit(t) for t in tasks]

    def _next(self) -> LoadTask | None:
        if self.on_demand:
            return self.on_demand[0]
        if self.prefetch:
            return self.prefetch[0]
        return None

    def _pop(self, task: LoadTask) -> None:
        (self.on_demand if task.kind is TaskKind.ON_DEMAND else self.prefetch).popleft()

    def _start_next(self, task: LoadTask) -> None:
        start = max(self.busy_until, task.enqueue_time)
        self._pop(task)
        if task.kind is TaskKind.PREFETCH and (
            task.target_pos < self.front or (self.should_drop and self.should_drop(task))
        ):
            self.dropped.append((task, start))
            return
        self.in_flight = task
        self._start = start
        self._finish = start + load_time(task.precision, self.cost)

    def _complete(self) -> Completion:
        c = Completion(self.in_flight, self._start, self._finish)
        self.busy_until = self._finish
        self.in_flight = None
        self.completions.append(c)
        if self.on_complete is not None:
            self.on_complete(c)
        return c

    def step(self, now: float) -> list[Completion]:
        """Advance the link to ``now``: finish transfers due by then and start
        any queued transfer whose start time falls strictly before ``now``."""
        done = []
        while True:
            if self.in_flight is not None:
                if self._finish <= now:
                    done.append(self._complete())
                    continue
                break
            task = self._next()
            if task is None or max(self.busy_until, task.enqueue_time) >= now:
                break
            self._start_next(task)
        return done

    def wait_for(self, idents: set, now: float) -> tuple[float, list[Completion]]:
        """Run the link until no transfer in ``idents`` is queued or in flight.

        Returns the time the last of them lands (``now`` if none was pending)
        and every completion processed on the way.
        """
        t = now
        done = []
        while True:
            waiting = (self.in_flight is not None and self.in_flight.ident in idents) or any(
                x.ident in idents for x in self.on_demand
            ) or any(x.ident in idents for x in self.prefetch)
            if not waiting:
                return t, done
            if self.in_flight is None:
                task = self._next()
                self._start_next(task)
                continue
            c = self._complete()
            done.append(c)
            t = max(t, c.finish)


def channel_step(ch: TransferChannel, now: float) -> list[tuple[LoadTask, float]]:
    """Functional wrapper: advance ``ch`` to ``now`` and list (task, finish_time) completions."""
    return [(c.task, c.finish) for c in ch.step(now)]
