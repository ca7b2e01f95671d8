"""Adaptive lookahead expert prediction.

The current layer's gating input is pushed through the gates of the next
``p`` layers in one stacked evaluation.  Walking those predictions in layer
order, the first layer with an expert missing from the cache becomes the
prefetch target; everything predicted up to that point is masked against
eviction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .gating import GateMatrix, GateOutcome, outcome_from_logits, stacked_logits


class CacheView(Protocol):
    def is_resident(self, key) -> bool: ...


@dataclass(frozen=True)
class LookaheadPrediction:
    origin_layer: int
    # outcomes[j][r]: predicted outcome of lookahead layer j for input row r
    outcomes: tuple[tuple[GateOutcome, ...], ...] = ()
    chosen_prefetch_layer: int | None = None
    masked: frozenset = field(default_factory=frozenset)

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(self.origin_layer + 1 + j for j in range(len(self.outcomes)))

    def predicted_keys(self, layer: int) -> tuple:
        """Distinct predicted keys for one lookahead layer, in first-seen rank order."""
        j = layer - self.origin_layer - 1
        if not 0 <= j < len(self.outcomes):
            return ()
        seen = {}
        for g in self.outcomes[j]:
            for k in g.keys:
                seen.setdefault(k, None)
        return tuple(seen)


def _stacked_logits(xs: np.ndarray, gates: Sequence[GateMatrix]) -> np.ndarray:
    w = np.stack([np.asarray(g.weights, dtype=np.float64) for g in gates])
    return stacked_logits(xs, w)


def stacked_lookahead(
    x: np.ndarray, gates: Sequence[GateMatrix], top_k: int
) -> list[GateOutcome]:
    """Evaluate several layers' gates on one input at once."""
    if len(gates) == 0:
        raise ValueError("stacked_lookahead needs at least one gate matrix")
    x = np.asarray(x, dtype=np.float64)
    for g in gates:
        if x.ndim != 1 or g.d_model != x.shape[0]:
            raise ValueError(f"gate of layer {g.layer} incompatible with input {x.shape}")
    logits = _stacked_logits(x[None, :], gates)[0]
    return [outcome_from_logits(logits[j], g.layer, top_k) for j, g in enumerate(gates)]


def adaptive_predict(
    x: np.ndarray,
    layer: int,
    p: int,
    gates: Sequence[GateMatrix],
    top_k: int,
    cache: CacheView,
) -> LookaheadPrediction:
    """Predict upcoming experts and pick the first lookahead layer that needs loading.

    ``x`` may be a single gating input or a batch of rows (prefill); batch
    predictions are unioned per layer. ``gates`` holds every layer's gate.
    """
    n_layers = len(gates)
    last = min(layer + p, n_layers - 1)
    if p < 1 or last <= layer:
        return LookaheadPrediction(layer)
    xs = np.asarray(x, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[None, :]
    ahead = gates[layer + 1 : last + 1]
    logits = _stacked_logits(xs, ahead)
    outcomes = tuple(
        tuple(outcome_from_logits(logits[r, j], g.layer, top_k) for r in range(xs.shape[0]))
        for j, g in enumerate(ahead)
    )
    pred = LookaheadPrediction(layer, outcomes)
    masked = set()
    chosen = None
    for target in pred.layers:
        keys = pred.predicted_keys(target)
        masked.update(keys)
        if any(not cache.is_resident(k) for k in keys):
            chosen = target
            break
    return LookaheadPrediction(layer, outcomes, chosen, frozenset(masked))


def top1_accuracy(trace, distance: int = 1) -> float:
    """Fraction of (token, layer) pairs whose top-1 expert at ``layer + distance``
    is predicted correctly from the gating input at ``layer``."""
    gates = trace.gates
    n_layers = len(gates)
    if distance < 1 or distance >= n_layers:
        raise ValueError(f"distance must lie in [1, {n_layers - 1}]")
    w = np.stack([np.asarray(g.weights, dtype=np.float64) for g in gates])
    hits = total = 0
    for seq in trace.sequences:
        for block in (seq.prompt, seq.decode):
            if len(block) == 0:
                continue
            xs = np.asarray(block, dtype=np.float64)  # (tokens, layers, d)
            actual = np.einsum("lnd,tld->tln", w, xs)
            predicted = np.einsum("lnd,tld->tln", w[distance:], xs[:, :-distance])
            a = np.argmax(actual[:, distance:], axis=-1)
            b = np.argmax(predicted, axis=-1)
            hits += int((a == b).sum())
            total += a.size
    return hits / total if total else float("nan")
