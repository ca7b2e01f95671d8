"""Top-k gating, unimportance scores and the High/Low/Skip precision classifier."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ConfigError, ExpertKey, Precision


class Decision(str, enum.Enum):
    HIGH = "high"
    LOW = "low"
    SKIP = "skip"

    @property
    def precision(self) -> Precision | None:
        if self is Decision.SKIP:
            return None
        return Precision(self.value)


@dataclass(frozen=True)
class GateMatrix:
    layer: int
    weights: np.ndarray  # (n_experts, d_model)

    @property
    def n_experts(self) -> int:
        return self.weights.shape[0]

    @property
    def d_model(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class GateOutcome:
    """Selected experts of one layer, most important first."""

    layer: int
    ranked: tuple[tuple[ExpertKey, float], ...]

    @property
    def keys(self) -> tuple[ExpertKey, ...]:
        return tuple(k for k, _ in self.ranked)

    @property
    def weights(self) -> tuple[float, ...]:
        return tuple(w for _, w in self.ranked)

    @property
    def top1(self) -> ExpertKey:
        return self.ranked[0][0]


def _select(logits: np.ndarray, top_k: int) -> np.ndarray:
    # stable sort on -logits keeps ascending expert index among ties
    return np.argsort(-logits, kind="stable")[:top_k]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def stacked_logits(xs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Logits of ``rows`` inputs against ``p`` stacked gates: (rows, d) x (p, n, d) -> (rows, p, n).

    Multiply-then-reduce keeps the per-row summation order independent of how
    many gates are stacked, so stacked and one-at-a-time evaluation agree bit for bit.
    """
    return (weights[None, :, :, :] * xs[:, None, None, :]).sum(axis=-1)


def outcome_from_logits(logits: np.ndarray, layer: int, top_k: int) -> GateOutcome:
    idx = _select(logits, top_k)
    w = _softmax(logits[idx])
    return GateOutcome(
        layer, tuple((ExpertKey(layer, int(e)), float(v)) for e, v in zip(idx, w))
    )


def compute_gate(x: np.ndarray, gate: GateMatrix, top_k: int) -> GateOutcome:
    """Linear gate followed by top-k selection and softmax over the selected logits."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != gate.d_model:
        raise ValueError(f"gating input has shape {x.shape}, gate expects ({gate.d_model},)")
    if not 1 <= top_k <= gate.n_experts:
        raise ValueError(f"top_k={top_k} outside [1, {gate.n_experts}]")
    logits = stacked_logits(x[None, :], np.asarray(gate.weights, dtype=np.float64)[None])[0, 0]
    return outcome_from_logits(logits, gate.layer, top_k)


def unimportance_scores(g: GateOutcome) -> list[float]:
    """Cumulative weight of all higher-ranked experts; 0 for the top expert."""
    scores = []
    acc = 0.0
    for _, w in g.ranked:
        scores.append(acc)
        acc += w
    return scores


def classify_precision(scores: Sequence[float], t1: float, t2: float) -> tuple[Decision, ...]:
    if not 0.0 <= t1 <= t2 <= 1.0:
        raise ConfigError(f"thresholds must satisfy 0 <= t1 <= t2 <= 1, got t1={t1}, t2={t2}")
    out = []
    for rank, s in enumerate(scores):
        if rank == 0 or s <= t1:
            out.append(Decision.HIGH)
        elif s <= t2:
            out.append(Decision.LOW)
        else:
            out.append(Decision.SKIP)
    return tuple(out)


def all_high(g: GateOutcome) -> tuple[Decision, ...]:
    return (Decision.HIGH,) * len(g.ranked)
