import json

import numpy as np
import pytest

from mpoffload import ModelSpec, TraceSpec, generate
from mpoffload.traceio import MAGIC, TraceFormatError, convert, read_trace, write_trace


@pytest.fixture
def tiny():
    m = ModelSpec(n_layers=2, n_experts_per_layer=4, top_k=2, d_model=8)
    return generate(TraceSpec(model=m, prompt_len=3, decode_len=7, n_sequences=2, seed=1))


def same(a, b):
    assert a.model == b.model
    assert all(np.array_equal(x.weights, y.weights) for x, y in zip(a.gates, b.gates))
    for s, t in zip(a.sequences, b.sequences, strict=True):
        assert np.array_equal(s.prompt, t.prompt) and np.array_equal(s.decode, t.decode)


def test_jsonl_round_trip(tiny, tmp_path):
    write_trace(tiny, tmp_path / "t.jsonl")
    same(tiny, read_trace(tmp_path / "t.jsonl"))


def test_binary_round_trip(tiny, tmp_path):
    write_trace(tiny, tmp_path / "t.bin")
    assert (tmp_path / "t.bin").read_bytes()[:8] == MAGIC
    same(tiny, read_trace(tmp_path / "t.bin"))


def test_converter_is_lossless(tiny, tmp_path):
    write_trace(tiny, tmp_path / "a.jsonl")
    convert(tmp_path / "a.jsonl", tmp_path / "b.bin")
    convert(tmp_path / "b.bin", tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "c.jsonl").read_bytes()


def test_writes_are_deterministic(tiny, tmp_path):
    write_trace(tiny, tmp_path / "a.jsonl")
    write_trace(generate(TraceSpec.from_dict(tiny.generator["spec"])), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_header_declares_sequences(tiny, tmp_path):
    write_trace(tiny, tmp_path / "t.jsonl")
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    head = json.loads(lines[0])
    assert head["format"] == "mpoffload-trace" and head["n_sequences"] == 2
    assert json.loads(lines[1]) == {"type": "sequence", "seq": 0, "prompt_len": 3, "decode_len": 7}


def _corrupt(tiny, tmp_path, row, fn):
    write_trace(tiny, tmp_path / "t.jsonl")
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    lines[row] = fn(lines[row])
    (tmp_path / "t.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceFormatError) as err:
        read_trace(tmp_path / "t.jsonl")
    return err.value


def test_bad_json_row_is_reported(tiny, tmp_path):
    e = _corrupt(tiny, tmp_path, 4, lambda s: s[:-3])
    assert e.row == 4 and "row 4" in str(e)


def test_short_vector_is_reported(tiny, tmp_path):
    def shorten(s):
        rec = json.loads(s)
        rec["x"][0] = rec["x"][0][:8]
        return json.dumps(rec)

    assert _corrupt(tiny, tmp_path, 3, shorten).row == 3


def test_missing_tokens_are_reported(tiny, tmp_path):
    write_trace(tiny, tmp_path / "t.jsonl")
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    (tmp_path / "t.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(TraceFormatError, match="fewer tokens"):
        read_trace(tmp_path / "t.jsonl")


def test_truncated_binary_is_reported(tiny, tmp_path):
    write_trace(tiny, tmp_path / "t.bin")
    data = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-10])
    with pytest.raises(TraceFormatError):
        read_trace(tmp_path / "t.bin")


def test_not_a_trace(tmp_path):
    (tmp_path / "x.jsonl").write_text('{"type": "token"}\n')
    with pytest.raises(TraceFormatError):
        read_trace(tmp_path / "x.jsonl")
