"""Synthetic gating traces and the toy-expert importance-proxy check.

A trace holds one gate matrix per layer and, per sequence, the gating input
of every layer for every prompt and decode token.  The generator walks a
latent unit vector through layers and tokens::

    z[t, l+1] = normalize(eps * z[t, l] + (1 - eps) * noise)
    z[t+1, 0] = normalize(rho * z[t, 0] + (1 - rho) * noise)
    x[t, l]   = normalize(z[t, l] + alpha * pref[s])

where ``pref[s]`` is a random unit direction drawn per sequence and shared by
all its layers and tokens, so each gate sees a constant logit bias that
favours a sequence-specific handful of experts.  Gate rows are orthonormal (scaled) when
the model has no more experts than gating dimensions, which makes expert
selection exactly exchangeable at ``alpha = 0``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .gating import GateMatrix, GateOutcome, compute_gate, outcome_from_logits, stacked_logits
from .model import ConfigError, ModelSpec


class UndefinedCorrelationError(ValueError):
    """Pearson correlation requested on data without variance."""


@dataclass(frozen=True)
class TraceSpec:
    model: ModelSpec = field(default_factory=ModelSpec)
    prompt_len: int = 16
    decode_len: int = 32
    n_sequences: int = 4
    layer_similarity: float = 0.9
    token_locality: float = 0.5
    affinity_skew: float = 0.6
    gate_scale: float = 11.0
    shared_gates: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.prompt_len < 1:
            raise ConfigError("prompt_len must be >= 1 (prefill needs a prompt token)")
        if self.decode_len < 0 or self.n_sequences < 1:
            raise ConfigError("decode_len must be >= 0 and n_sequences >= 1")
        for name in ("layer_similarity", "token_locality"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.affinity_skew < 0:
            raise ConfigError("affinity_skew must be >= 0")
        if self.gate_scale <= 0:
            raise ConfigError("gate_scale must be positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TraceSpec":
        d = dict(d)
        if isinstance(d.get("model"), dict):
            d["model"] = ModelSpec(**d["model"])
        return cls(**d)


@dataclass
class Sequence:
    prompt: np.ndarray  # (prompt_len, n_layers, d_model) float32
    decode: np.ndarray  # (decode_len, n_layers, d_model) float32

    def block(self, name: str) -> np.ndarray:
        return self.prompt if name == "prompt" else self.decode


@dataclass
class Trace:
    model: ModelSpec
    gates: list[GateMatrix]
    sequences: list[Sequence]
    generator: dict[str, Any] = field(default_factory=dict)
    _memo: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_tokens(self) -> int:
        return sum(len(s.prompt) + len(s.decode) for s in self.sequences)

    def _weights(self) -> np.ndarray:
        return np.stack([np.asarray(g.weights, dtype=np.float64) for g in self.gates])

    def gate_outcomes(self, top_k: int) -> list[dict[str, list[list[GateOutcome]]]]:
        """``out[seq][block][token][layer]`` gate outcome, memoized per ``top_k``."""
        key = ("gate", top_k)
        if key not in self._memo:
            w = self._weights()
            out = []
            for s in self.sequences:
                per = {}
                for name in ("prompt", "decode"):
                    xs = np.asarray(s.block(name), dtype=np.float64)
                    tok = [[None] * self.model.n_layers for _ in range(len(xs))]
                    for l in range(self.model.n_layers):
                        logits = stacked_logits(xs[:, l, :], w[l : l + 1])[:, 0, :]
                        for t in range(len(xs)):
                            tok[t][l] = outcome_from_logits(logits[t], l, top_k)
                    per[name] = tok
                out.append(per)
            self._memo[key] = out
        return self._memo[key]

    def lookahead_outcomes(self, top_k: int, p: int):
        """``out[seq][block][token][layer][j]``: outcome of layer ``layer+1+j``
        predicted from the gating input at ``layer``."""
        key = ("ahead", top_k, p)
        if key not in self._memo:
            w = self._weights()
            n = self.model.n_layers
            out = []
            for s in self.sequences:
                per = {}
                for name in ("prompt", "decode"):
                    xs = np.asarray(s.block(name), dtype=np.float64)
                    tok = [[()] * n for _ in range(len(xs))]
                    for l in range(n):
                        last = min(l + p, n - 1)
                        if last <= l:
                            continue
                        logits = stacked_logits(xs[:, l, :], w[l + 1 : last + 1])
                        for t in range(len(xs)):
                            tok[t][l] = tuple(
                                outcome_from_logits(logits[t, j], l + 1 + j, top_k)
                                for j in range(last - l)
                            )
                    per[name] = tok
                out.append(per)
            self._memo[key] = out
        return self._memo[key]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_gates(model: ModelSpec, rng: np.random.Generator, scale: float, shared: bool) -> list[np.ndarray]:
    n, d = model.n_experts_per_layer, model.d_model

    def one():
        if n <= d:
            q, _ = np.linalg.qr(rng.standard_normal((d, n)))
            return scale * q.T
        return scale * _unit(rng.standard_normal((n, d)))

    if shared:
        w = one()
        return [w] * model.n_layers
    return [one() for _ in range(model.n_layers)]


def expected_layer_cosine(eps: float) -> float:
    """Cosine between consecutive latent layer inputs when the noise is orthogonal."""
    if eps == 0.0:
        return 0.0
    return eps / np.sqrt(eps**2 + (1.0 - eps) ** 2)


def generate(spec: TraceSpec) -> Trace:
    m = spec.model
    rng = np.random.default_rng(spec.seed)
    L, d, n = m.n_layers, m.d_model, m.n_experts_per_layer
    eps, rho, alpha = spec.layer_similarity, spec.token_locality, spec.affinity_skew
    weights = make_gates(m, rng, spec.gate_scale, spec.shared_gates)
    gates = [GateMatrix(l, w.astype(np.float32)) for l, w in enumerate(weights)]
    n_tok = spec.prompt_len + spec.decode_len
    seqs = []
    for _ in range(spec.n_sequences):
        pref = _unit(rng.standard_normal(d))
        noise_tok = _unit(rng.standard_normal((n_tok, d)))
        noise_lay = _unit(rng.standard_normal((n_tok, L, d)))
        z = np.empty((n_tok, L, d))
        for t in range(n_tok):
            if t == 0:
                z[t, 0] = noise_tok[0]
            else:
                z[t, 0] = _unit(rho * z[t - 1, 0] + (1.0 - rho) * noise_tok[t])
            for l in range(1, L):
                if eps == 1.0:
                    z[t, l] = z[t, l - 1]
                else:
                    z[t, l] = _unit(eps * z[t, l - 1] + (1.0 - eps) * noise_lay[t, l])
        x = _unit(z + alpha * pref) if alpha > 0 else z
        x = x.astype(np.float32)
        seqs.append(Sequence(x[: spec.prompt_len].copy(), x[spec.prompt_len :].copy()))
    return Trace(m, gates, seqs, {"kind": "synthetic", "spec": spec.to_dict()})


def consecutive_layer_cosine(trace: Trace) -> float:
    """Mean cosine similarity between gating inputs of adjacent layers."""
    vals = []
    for s in trace.sequences:
        for block in (s.prompt, s.decode):
            if len(block) == 0:
                continue
            x = np.asarray(block, dtype=np.float64)
            a, b = x[:, :-1], x[:, 1:]
            cos = (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
            vals.append(cos.ravel())
    return float(np.concatenate(vals).mean())


def selection_frequencies(trace: Trace, top_k: int) -> np.ndarray:
    """Share of all top-k selections that went to each expert index, pooled over layers."""
    counts = np.zeros(trace.model.n_experts_per_layer)
    for per in trace.gate_outcomes(top_k):
        for block in per.values():
            for tok in block:
                for g in tok:
                    for k in g.keys:
                        counts[k.expert] += 1
    return counts / counts.sum()


# -- toy experts --------------------------------------------------------------


@dataclass(frozen=True)
class ToyExpert:
    """Gated feed-forward expert: W2 @ (silu(W1 @ x) * (W3 @ x))."""

    w1: np.ndarray  # (d_ff, d_model)
    w3: np.ndarray  # (d_ff, d_model)
    w2: np.ndarray  # (d_model, d_ff)

    def __post_init__(self):
        d_ff, d = self.w1.shape
        if self.w3.shape != (d_ff, d) or self.w2.shape != (d, d_ff):
            raise ValueError(
                f"inconsistent expert shapes w1={self.w1.shape} w3={self.w3.shape} w2={self.w2.shape}"
            )

    @classmethod
    def random(cls, d_model: int, d_ff: int, rng: np.random.Generator) -> "ToyExpert":
        return cls(
            rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_ff, d_model)),
            rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_ff, d_model)),
            rng.normal(0.0, 1.0 / np.sqrt(d_ff), (d_model, d_ff)),
        )


def silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def toy_expert_eval(x: np.ndarray, expert: ToyExpert) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (expert.w1.shape[1],):
        raise ValueError(f"input shape {x.shape} does not match expert d_model {expert.w1.shape[1]}")
    return expert.w2 @ (silu(expert.w1 @ x) * (expert.w3 @ x))


def moe_output(x: np.ndarray, g: GateOutcome, experts: list[ToyExpert]) -> np.ndarray:
    """Weighted sum of the selected experts' outputs."""
    return sum(w * toy_expert_eval(x, experts[k.expert]) for k, w in g.ranked)


@dataclass(frozen=True)
class ProxySpec:
    d_model: int = 32
    d_ff: int = 64
    n_experts: int = 8
    top_k: int = 2
    identical_experts: bool = False
    seed: int = 0


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    den = np.sqrt((da * da).sum() * (db * db).sum())
    if a.size < 2 or den == 0.0:
        raise UndefinedCorrelationError("correlation undefined: fewer than two points or zero variance")
    return float((da * db).sum() / den)


def proxy_correlation(n_samples: int, spec: ProxySpec = ProxySpec()) -> float:
    """Pearson r between each selected expert's gate weight and its share of
    the weighted output magnitude.

    Per sample, ``||w_e * E_e(x)||`` is normalized over the selected experts,
    matching the normalization of the gate weights themselves.
    """
    if n_samples < 2:
        raise UndefinedCorrelationError(f"need at least 2 samples, got {n_samples}")
    rng = np.random.default_rng(spec.seed)
    gate = GateMatrix(0, rng.standard_normal((spec.n_experts, spec.d_model)))
    if spec.identical_experts:
        e = ToyExpert.random(spec.d_model, spec.d_ff, rng)
        experts = [e] * spec.n_experts
    else:
        experts = [ToyExpert.random(spec.d_model, spec.d_ff, rng) for _ in range(spec.n_experts)]
    weights, shares = [], []
    for _ in range(n_samples):
        x = rng.standard_normal(spec.d_model)
        g = compute_gate(x, gate, spec.top_k)
        mags = np.array([w * np.linalg.norm(toy_expert_eval(x, experts[k.expert])) for k, w in g.ranked])
        weights.extend(g.weights)
        shares.extend(mags / mags.sum())
    return pearson(np.array(weights), np.array(shares))
