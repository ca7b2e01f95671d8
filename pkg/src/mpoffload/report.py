"""CSV and JSON serialization of simulation results, stamped with a run manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .engine import SimReport

SUMMARY_SCHEMA = "mpoffload.sim-summary"
SCHEMA_VERSION = 1

TOKEN_COLUMNS = [
    "manifest_hash", "seq", "phase", "token", "latency_ms", "compute_ms", "stall_ms",
    "n_high", "n_low", "n_skip", "misses", "miss_penalty", "bytes_loaded",
]

SUMMARY_COLUMNS = [
    "prefill_latency_ms", "decode_ms_per_token", "tokens_per_s", "total_miss_penalty",
    "normalized_miss_penalty", "high_hit_ratio", "low_hit_ratio", "hit_ratio",
    "bytes_loaded", "loads_high", "loads_low", "prefetch_loads", "dropped_prefetches",
    "high_pct", "low_pct", "skip_pct",
]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    tool_version: str
    seed: int | None
    config_path: str | None = None
    trace_path: str | None = None
    output_dir: str | None = None
    inputs: dict[str, str] = field(default_factory=dict)  # name -> sha256 of contents
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def hash(self) -> str:
        # paths are deliberately excluded so identical inputs hash identically anywhere
        ident = {
            "command": self.command, "tool_version": self.tool_version, "seed": self.seed,
            "inputs": self.inputs, "extra": self.extra,
        }
        return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict[str, Any]:
        return {
            "command": self.command, "tool_version": self.tool_version, "seed": self.seed,
            "config_path": self.config_path, "trace_path": self.trace_path,
            "output_dir": self.output_dir, "inputs": self.inputs, "extra": self.extra,
            "hash": self.hash,
        }


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_row(report: SimReport) -> dict[str, Any]:
    s = report.summary()
    mix = s.pop("precision_mix")
    s["high_pct"], s["low_pct"], s["skip_pct"] = mix["high"], mix["low"], mix["skip"]
    return {k: s[k] for k in SUMMARY_COLUMNS}


def token_csv(report: SimReport, manifest_hash: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TOKEN_COLUMNS)
    for r in report.token_rows:
        w.writerow([_fmt(v) for v in (
            manifest_hash, r.seq, r.phase, r.token, r.latency_ms, r.compute_ms, r.stall_ms,
            r.n_high, r.n_low, r.n_skip, r.misses, r.miss_penalty, r.bytes_loaded,
        )])
    rows = report.token_rows
    w.writerow([_fmt(v) for v in (
        manifest_hash, "", "summary", "",
        sum(r.latency_ms for r in rows), sum(r.compute_ms for r in rows),
        sum(r.stall_ms for r in rows), sum(r.n_high for r in rows), sum(r.n_low for r in rows),
        sum(r.n_skip for r in rows), sum(r.misses for r in rows),
        report.total_miss_penalty, report.bytes_loaded,
    )])
    return buf.getvalue()


def summary_json(report: SimReport, manifest: RunManifest, config: dict[str, Any]) -> str:
    doc = {
        "schema": SUMMARY_SCHEMA,
        "schema_version": SCHEMA_VERSION,
        "manifest": manifest.to_dict(),
        "config": config,
        "summary": report.summary(),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def table_csv(header: list[str], rows: list[list[Any]], manifest_hash: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["manifest_hash"] + header)
    for r in rows:
        w.writerow([manifest_hash] + [_fmt(v) for v in r])
    return buf.getvalue()


def write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")
