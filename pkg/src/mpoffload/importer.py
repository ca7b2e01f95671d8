"""Build a :class:`Trace` from plain arrays.

This is the entry point for routing data captured elsewhere (for instance
hooks on a real model's router).  No model code ships here; the expected
layout is:

``gates``
    float array of shape ``(n_layers, n_experts, d_model)``; row ``e`` of
    layer ``l`` is the router vector whose dot product with the gating
    input gives expert ``e``'s logit.
``sequences``
    list of ``(prompt, decode)`` pairs, each of shape
    ``(tokens, n_layers, d_model)``: the gating input each token presented
    to each layer's router.  ``prompt`` needs at least one token; ``decode``
    may be empty.

Passing ``d_model = n_experts`` with identity gates lets a caller feed raw
router logits directly.
"""

from __future__ import annotations

import numpy as np

from .gating import GateMatrix
from .model import ConfigError, ModelSpec
from .tracegen import Sequence, Trace


def trace_from_arrays(
    gates,
    sequences,
    top_k: int = 2,
    seed: int = 0,
    generator: dict | None = None,
) -> Trace:
    g = np.asarray(gates, dtype=np.float32)
    if g.ndim != 3:
        raise ConfigError(f"gates must be (n_layers, n_experts, d_model), got shape {g.shape}")
    n_layers, n_experts, d = g.shape
    model = ModelSpec(n_layers=n_layers, n_experts_per_layer=n_experts, top_k=top_k, d_model=d, seed=seed)
    seqs = []
    for i, (prompt, decode) in enumerate(sequences):
        p = np.asarray(prompt, dtype=np.float32).reshape(-1, n_layers, d)
        q = np.asarray(decode, dtype=np.float32).reshape(-1, n_layers, d)
        if len(p) < 1:
            raise ConfigError(f"sequence {i} has no prompt tokens")
        seqs.append(Sequence(p, q))
    if not seqs:
        raise ConfigError("a trace needs at least one sequence")
    return Trace(model, [GateMatrix(l, g[l]) for l in range(n_layers)], seqs, generator or {"source": "arrays"})
