import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mpoffload import ModelSpec, TraceSpec, generate  # noqa: E402
from mpoffload.importer import trace_from_arrays  # noqa: E402


def logit_trace(tokens, n_experts=4, top_k=2, prompt=None, sequences=None):
    """Trace whose gates are identities, so each gating input *is* the logit vector.

    ``tokens`` is a list of decode tokens, each a list of per-layer logit rows.
    """
    n_layers = len(tokens[0])
    eye = np.stack([np.eye(n_experts)] * n_layers)
    if sequences is None:
        first = prompt if prompt is not None else [tokens[0]]
        sequences = [(first, tokens)]
    return trace_from_arrays(eye, sequences, top_k=top_k)


def one_hot_logits(experts, n_experts, strengths=(8.0, 4.0)):
    """Logit row that selects ``experts`` in rank order with fixed margins."""
    row = np.zeros(n_experts)
    for e, s in zip(experts, strengths):
        row[e] = s
    return row


@pytest.fixture
def small_trace():
    m = ModelSpec(n_layers=4, n_experts_per_layer=8, top_k=2, d_model=16, seed=3)
    return generate(TraceSpec(model=m, prompt_len=4, decode_len=12, n_sequences=2, seed=3))


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
