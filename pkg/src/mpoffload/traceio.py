"""Trace files: self-describing JSON lines and an equivalent compact binary form.

JSON lines::

    {"type": "header", "format": "mpoffload-trace", "version": 1, "model": {...},
     "generator": {...}, "gates": [<b64 f32le, one per layer>], "n_sequences": N}
    {"type": "sequence", "seq": 0, "prompt_len": P, "decode_len": D}
    {"type": "token", "seq": 0, "phase": "prompt", "index": 0, "x": [<b64 f32le per layer>]}
    ...

Binary: ``MPTRACE1`` magic, little-endian uint32 header length, the header
JSON (model, generator, per-sequence lengths), then gates and every token's
gating inputs as contiguous little-endian float32 arrays in trace order.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np

from .gating import GateMatrix
from .model import ModelSpec
from .tracegen import Sequence, Trace

FORMAT = "mpoffload-trace"
VERSION = 1
MAGIC = b"MPTRACE1"
_F32 = np.dtype("<f4")


class TraceFormatError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype=_F32).tobytes()).decode("ascii")


def _unb64(s: str, shape: tuple[int, ...], row: int) -> np.ndarray:
    try:
        raw = base64.b64decode(s, validate=True)
    except (ValueError, TypeError) as exc:
        raise TraceFormatError(f"bad base64 payload ({exc})", row) from None
    n = int(np.prod(shape))
    if len(raw) != 4 * n:
        raise TraceFormatError(f"payload has {len(raw) // 4} floats, expected {n}", row)
    return np.frombuffer(raw, dtype=_F32).reshape(shape).astype(np.float32)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _model_dict(m: ModelSpec) -> dict:
    return {
        "n_layers": m.n_layers, "n_experts_per_layer": m.n_experts_per_layer,
        "top_k": m.top_k, "d_model": m.d_model, "seed": m.seed,
    }


def write_jsonl(trace: Trace, path) -> None:
    m = trace.model
    lines = [
        _dumps({
            "type": "header", "format": FORMAT, "version": VERSION,
            "encoding": "base64-float32-le", "model": _model_dict(m),
            "generator": trace.generator, "gates": [_b64(g.weights) for g in trace.gates],
            "n_sequences": len(trace.sequences),
        })
    ]
    for i, s in enumerate(trace.sequences):
        lines.append(_dumps({
            "type": "sequence", "seq": i, "prompt_len": len(s.prompt), "decode_len": len(s.decode),
        }))
        for phase, block in (("prompt", s.prompt), ("decode", s.decode)):
            for t, x in enumerate(block):
                lines.append(_dumps({
                    "type": "token", "seq": i, "phase": phase, "index": t,
                    "x": [_b64(x[l]) for l in range(m.n_layers)],
                }))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_model(d, row) -> ModelSpec:
    try:
        return ModelSpec(**d)
    except (TypeError, ValueError) as exc:
        raise TraceFormatError(f"invalid model section ({exc})", row) from None


def read_jsonl(path) -> Trace:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    if not rows:
        raise TraceFormatError("empty trace file", 0)

    def load(i):
        try:
            obj = json.loads(rows[i])
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"not JSON ({exc.msg})", i) from None
        if not isinstance(obj, dict) or "type" not in obj:
            raise TraceFormatError("record lacks a 'type' field", i)
        return obj

    head = load(0)
    if head["type"] != "header" or head.get("format") != FORMAT:
        raise TraceFormatError("first record must be a trace header", 0)
    if head.get("version") != VERSION:
        raise TraceFormatError(f"unsupported version {head.get('version')}", 0)
    m = _parse_model(head.get("model"), 0)
    gates_raw = head.get("gates", [])
    if len(gates_raw) != m.n_layers:
        raise TraceFormatError(f"{len(gates_raw)} gate matrices for {m.n_layers} layers", 0)
    gates = [
        GateMatrix(l, _unb64(s, (m.n_experts_per_layer, m.d_model), 0))
        for l, s in enumerate(gates_raw)
    ]
    seqs: list[Sequence] = []
    fills: list[dict] = []
    cur = None
    filled = {}
    for i in range(1, len(rows)):
        if not rows[i].strip():
            continue
        rec = load(i)
        if rec["type"] == "sequence":
            if rec.get("seq") != len(seqs):
                raise TraceFormatError(f"sequence {rec.get('seq')} out of order", i)
            shape = (m.n_layers, m.d_model)
            cur = Sequence(
                np.zeros((int(rec["prompt_len"]),) + shape, np.float32),
                np.zeros((int(rec["decode_len"]),) + shape, np.float32),
            )
            seqs.append(cur)
            filled = {"prompt": 0, "decode": 0}
            fills.append(filled)
        elif rec["type"] == "token":
            if cur is None or rec.get("seq") != len(seqs) - 1:
                raise TraceFormatError("token outside its sequence", i)
            phase = rec.get("phase")
            if phase not in filled:
                raise TraceFormatError(f"unknown phase {phase!r}", i)
            block = cur.block(phase)
            idx = filled[phase]
            if rec.get("index") != idx or idx >= len(block):
                raise TraceFormatError(f"unexpected {phase} token index {rec.get('index')}", i)
            xs = rec.get("x")
            if not isinstance(xs, list) or len(xs) != m.n_layers:
                raise TraceFormatError("token needs one gating vector per layer", i)
            for l, s in enumerate(xs):
                block[idx, l] = _unb64(s, (m.d_model,), i)
            filled[phase] = idx + 1
        else:
            raise TraceFormatError(f"unknown record type {rec['type']!r}", i)
    if len(seqs) != head.get("n_sequences", len(seqs)):
        raise TraceFormatError(f"header promises {head.get('n_sequences')} sequences, found {len(seqs)}", len(rows))
    for i, (s, f) in enumerate(zip(seqs, fills)):
        if f["prompt"] != len(s.prompt) or f["decode"] != len(s.decode):
            raise TraceFormatError(f"sequence {i} has fewer tokens than declared", len(rows))
    return Trace(m, gates, seqs, head.get("generator", {}))


def write_binary(trace: Trace, path) -> None:
    m = trace.model
    header = _dumps({
        "format": FORMAT, "version": VERSION, "model": _model_dict(m),
        "generator": trace.generator,
        "sequences": [[len(s.prompt), len(s.decode)] for s in trace.sequences],
    }).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    parts += [np.ascontiguousarray(g.weights, dtype=_F32).tobytes() for g in trace.gates]
    for s in trace.sequences:
        parts.append(np.ascontiguousarray(s.prompt, dtype=_F32).tobytes())
        parts.append(np.ascontiguousarray(s.decode, dtype=_F32).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_binary(path) -> Trace:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise TraceFormatError("missing binary trace magic", 0)
    (n,) = struct.unpack_from("<I", data, 8)
    try:
        head = json.loads(data[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceFormatError(f"bad header ({exc})", 0) from None
    m = _parse_model(head.get("model"), 0)
    off = 12 + n

    def take(shape, row):
        nonlocal off
        size = int(np.prod(shape)) * 4
        if off + size > len(data):
            raise TraceFormatError("truncated binary trace", row)
        a = np.frombuffer(data, dtype=_F32, count=size // 4, offset=off).reshape(shape)
        off += size
        return a.astype(np.float32)

    gates = [GateMatrix(l, take((m.n_experts_per_layer, m.d_model), 0)) for l in range(m.n_layers)]
    seqs = []
    for i, (p, d) in enumerate(head["sequences"]):
        seqs.append(Sequence(
            take((p, m.n_layers, m.d_model), i + 1), take((d, m.n_layers, m.d_model), i + 1)
        ))
    if off != len(data):
        raise TraceFormatError(f"{len(data) - off} trailing bytes", len(seqs) + 1)
    return Trace(m, gates, seqs, head.get("generator", {}))


def is_binary(path) -> bool:
    with open(path, "rb") as f:
        return f.read(8) == MAGIC


def read_trace(path) -> Trace:
    return read_binary(path) if is_binary(path) else read_jsonl(path)


def write_trace(trace: Trace, path, fmt: str | None = None) -> None:
    """Write ``trace``; ``fmt`` is "jsonl" or "binary", else inferred from the suffix."""
    if fmt is None:
        fmt = "binary" if Path(path).suffix in (".bin", ".mpt") else "jsonl"
    if fmt == "binary":
        write_binary(trace, path)
    elif fmt == "jsonl":
        write_jsonl(trace, path)
    else:
        raise ValueError(f"unknown trace format {fmt!r}")


def convert(src, dst, fmt: str | None = None) -> None:
    write_trace(read_trace(src), dst, fmt)
