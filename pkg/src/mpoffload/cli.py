"""Command-line front end.

Exit codes: 0 on success, 1 on a usage error, 2 when an input file or
value violates its contract (bad config, malformed trace, mismatch).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .cache import CapacityError, Policy, PolicyWeights
from .config import config_to_dict, load_config
from .engine import RunConfig, TraceMismatchError, calibrate_weights, run
from .model import ConfigError
from .report import (
    SUMMARY_COLUMNS,
    RunManifest,
    file_digest,
    summary_json,
    summary_row,
    table_csv,
    token_csv,
    write_text,
)
from .traceio import TraceFormatError, read_trace, write_trace
from .tracegen import ProxySpec, TraceSpec, UndefinedCorrelationError, generate, proxy_correlation

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT = 0, 1, 2
AXES = ("p", "t1", "t2", "cap_high", "cap_low", "weights", "policy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        over["model"] = cfg.model.__class__(**{**asdict(cfg.model), "seed": args.seed})
    for name in ("dynamic_loading", "prefetching", "sequence_reset"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    for name in ("t1", "t2", "lookahead", "cap_high", "cap_low"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if getattr(args, "policy", None):
        over["policy"] = Policy(args.policy)
    if getattr(args, "weights", None):
        over["weights"] = _parse_weights(args.weights)
    return cfg.with_(**over) if over else cfg


def _parse_weights(s: str) -> PolicyWeights:
    try:
        vals = [float(v) for v in s.split(":")]
    except ValueError:
        raise ConfigError(f"weights {s!r} must be four numbers lru:lfu:lhu:fld") from None
    if len(vals) != 4:
        raise ConfigError(f"weights {s!r} must be four numbers lru:lfu:lhu:fld")
    return PolicyWeights(*vals)


def _manifest(args, command: str, seed, extra=None) -> RunManifest:
    inputs = {}
    for name in ("config", "trace", "spec"):
        path = getattr(args, name, None)
        if path:
            inputs[name] = file_digest(path)
    return RunManifest(
        command=command, tool_version=__version__, seed=seed,
        config_path=getattr(args, "config", None), trace_path=getattr(args, "trace", None),
        output_dir=getattr(args, "out", None), inputs=inputs, extra=extra or {},
    )


def cmd_gen_trace(args) -> int:
    d = _read_json(args.spec) if args.spec else {}
    try:
        spec = TraceSpec.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"invalid trace spec ({exc})") from None
    if args.seed is not None:
        spec = TraceSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_trace(generate(spec), args.out, args.format)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_convert_trace(args) -> int:
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_trace(read_trace(args.trace), args.out, args.format)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    trace = read_trace(args.trace)
    report = run(trace, cfg)
    man = _manifest(args, "simulate", cfg.model.seed, {"config": config_to_dict(cfg)})
    out = Path(args.out)
    write_text(out / "summary.json", summary_json(report, man, config_to_dict(cfg)))
    write_text(out / "tokens.csv", token_csv(report, man.hash))
    s = report.summary()
    print(
        f"decode {s['decode_ms_per_token']} ms/token, prefill {s['prefill_latency_ms']:.3f} ms, "
        f"normalized penalty {s['normalized_miss_penalty']}, bytes {s['bytes_loaded']:.0f}"
    )
    return EXIT_OK


def _axis_points(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise UsageError(f"--axis must look like name=v1,v2,... got {spec!r}")
    name, _, raw = spec.partition("=")
    name = name.strip()
    if name not in AXES:
        raise UsageError(f"unknown axis {name!r}; choose from {', '.join(AXES)}")
    vals = [v.strip() for v in raw.split(",") if v.strip()]
    if not vals:
        raise ConfigError(f"axis {name} has an empty grid")
    conv = {"p": int, "cap_high": int, "cap_low": int, "t1": float, "t2": float}
    try:
        if name in conv:
            return name, [conv[name](v) for v in vals]
        if name == "weights":
            return name, [_parse_weights(v) for v in vals]
        return name, [Policy(v) for v in vals]
    except ValueError as exc:
        raise ConfigError(f"bad value on axis {name}: {exc}") from None


def _point_config(cfg: RunConfig, axis: str, v) -> RunConfig:
    if axis == "p":
        return cfg.with_(lookahead=v, prefetching=v > 0)
    if axis == "t1":
        # keep the pair ordered so a high T1 is not rejected against the default T2
        return cfg.with_(t1=v, t2=max(cfg.t2, v))
    if axis == "t2":
        return cfg.with_(t2=v, t1=min(cfg.t1, v))
    if axis == "weights":
        return cfg.with_(weights=v, policy=Policy.WEIGHTED)
    return cfg.with_(**{axis: v})


def _sweep_point(job):
    trace, cfg = job
    return summary_row(run(trace, cfg))


def _label(v) -> str:
    if isinstance(v, PolicyWeights):
        return ":".join(repr(x) for x in v.as_tuple())
    if isinstance(v, Policy):
        return v.value
    return repr(v) if isinstance(v, float) else str(v)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    axis, values = _axis_points(args.axis)
    trace = read_trace(args.trace)
    jobs = [(trace, _point_config(cfg, axis, v)) for v in values]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_sweep_point, jobs))  # map keeps input order
    else:
        rows = [_sweep_point(j) for j in jobs]
    man = _manifest(args, "sweep", cfg.model.seed, {"axis": args.axis, "config": config_to_dict(cfg)})
    table = [[axis, _label(v)] + [r[c] for c in SUMMARY_COLUMNS] for v, r in zip(values, rows)]
    out = Path(args.out)
    write_text(out / "sweep.csv", table_csv(["axis", "value"] + SUMMARY_COLUMNS, table, man.hash))
    print(f"{len(table)} grid points written to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    trace = read_trace(args.trace)
    best, table = calibrate_weights(trace, cfg, args.grid_step)
    best_pen = min(p for _, p in table)
    man = _manifest(args, "calibrate", cfg.model.seed, {"grid_step": args.grid_step, "config": config_to_dict(cfg)})
    out = Path(args.out)
    doc = {
        "schema": "mpoffload.weights", "schema_version": 1, "manifest": man.to_dict(),
        "weights": asdict(best), "total_miss_penalty": best_pen,
    }
    write_text(out / "weights.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    rows = [list(w.as_tuple()) + [p] for w, p in table]
    write_text(out / "grid.csv", table_csv(["lru", "lfu", "lhu", "fld", "total_miss_penalty"], rows, man.hash))
    print(f"best weights lru={best.lru} lfu={best.lfu} lhu={best.lhu} fld={best.fld} penalty={best_pen}")
    return EXIT_OK


def cmd_validate_proxy(args) -> int:
    d = _read_json(args.spec) if args.spec else {}
    try:
        spec = ProxySpec(**d)
    except TypeError as exc:
        raise ConfigError(f"invalid proxy spec ({exc})") from None
    if args.seed is not None:
        spec = ProxySpec(**{**asdict(spec), "seed": args.seed})
    r = proxy_correlation(args.samples, spec)
    print(f"r = {r:.4f} over {args.samples} samples")
    if args.out:
        man = _manifest(args, "validate-proxy", spec.seed, {"samples": args.samples})
        doc = {
            "schema": "mpoffload.proxy", "schema_version": 1, "manifest": man.to_dict(),
            "spec": asdict(spec), "samples": args.samples, "r": r,
        }
        write_text(Path(args.out) / "proxy.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _toggle(p, name: str, help: str) -> None:
    flag = name.replace("_", "-")
    p.add_argument(f"--{flag}", dest=name, action="store_true", default=None, help=help)
    p.add_argument(f"--no-{flag}", dest=name, action="store_false", help=argparse.SUPPRESS)


def _run_options(p) -> None:
    p.add_argument("--config", help="run-config JSON (defaults used when omitted)")
    p.add_argument("--trace", required=True, help="trace file (JSON lines or binary)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the model seed (Random policy tie-breaks)")
    _toggle(p, "dynamic_loading", "force dynamic precision loading on (--no-... for off)")
    _toggle(p, "prefetching", "force prefetching on (--no-... for off)")
    _toggle(p, "sequence_reset", "reset usage statistics per sequence (--no-... for off)")
    p.add_argument("--policy", choices=[x.value for x in Policy])
    p.add_argument("--weights", help="policy weights as lru:lfu:lhu:fld")
    p.add_argument("--t1", type=float)
    p.add_argument("--t2", type=float)
    p.add_argument("--lookahead", type=int)
    p.add_argument("--cap-high", dest="cap_high", type=int)
    p.add_argument("--cap-low", dest="cap_low", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mpoffload", description="Mixed-precision expert offloading simulator.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-trace", help="generate a synthetic trace")
    p.add_argument("--spec", help="trace spec JSON (defaults used when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=["jsonl", "binary"])
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("convert-trace", help="convert between JSON lines and binary traces")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["jsonl", "binary"])
    p.set_defaults(func=cmd_convert_trace)

    p = sub.add_parser("simulate", help="run one simulation")
    _run_options(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run one simulation per grid point on a shared trace")
    _run_options(p)
    p.add_argument("--axis", required=True, help=f"name=v1,v2,... with name in {', '.join(AXES)}")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="grid-search the policy weights")
    _run_options(p)
    p.add_argument("--grid-step", dest="grid_step", type=float, default=0.1)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("validate-proxy", help="check the gate-weight importance proxy")
    p.add_argument("--spec", help="proxy spec JSON")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="optional output directory for proxy.json")
    p.set_defaults(func=cmd_validate_proxy)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mpoffload: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, TraceFormatError, TraceMismatchError, CapacityError,
            UndefinedCorrelationError, ValueError, OSError) as exc:
        print(f"mpoffload: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
