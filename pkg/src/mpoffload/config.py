"""Run-config files: one JSON document whose sections mirror :class:`RunConfig`.

Every key is optional; omitted keys take the defaults of a Mixtral-like
model (32 layers, 8 experts, top-2) on a 32 GB/s link with fp16/int4
experts, T1=0.6, T2=0.9.  Cache sizes may be given as expert counts
(``cap_high``/``cap_low``) or byte budgets (``high_budget_bytes``/
``low_budget_bytes``), which are converted to counts on load.
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

from .cache import Policy, PolicyWeights
from .engine import RunConfig
from .model import ConfigError, CostModel, ModelSpec

SECTIONS = ("model", "cost", "loader", "predictor", "cache")


def _pick(section: dict, allowed: set[str], where: str) -> dict:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    return section


def config_from_dict(d: dict[str, Any]) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    model = ModelSpec(**_pick(d.get("model", {}), {f.name for f in fields(ModelSpec)}, "model"))
    cost = CostModel(**_pick(d.get("cost", {}), {f.name for f in fields(CostModel)}, "cost"))
    loader = _pick(d.get("loader", {}), {"dynamic_loading", "t1", "t2"}, "loader")
    pred = _pick(d.get("predictor", {}), {"prefetching", "lookahead", "prefetch_precision"}, "predictor")
    cache = dict(
        _pick(
            d.get("cache", {}),
            {"policy", "cap_high", "cap_low", "high_budget_bytes", "low_budget_bytes",
             "weights", "sequence_reset"},
            "cache",
        )
    )
    if "high_budget_bytes" in cache:
        cache["cap_high"] = int(cache.pop("high_budget_bytes") // cost.expert_bytes_high)
    if "low_budget_bytes" in cache:
        cache["cap_low"] = int(cache.pop("low_budget_bytes") // cost.expert_bytes_low)
    if "weights" in cache:
        w = _pick(cache["weights"], {"lru", "lfu", "lhu", "fld"}, "cache.weights")
        cache["weights"] = PolicyWeights(**{k: float(w.get(k, 0.0)) for k in ("lru", "lfu", "lhu", "fld")})
    if "policy" in cache:
        try:
            cache["policy"] = Policy(str(cache["policy"]).lower())
        except ValueError:
            raise ConfigError(f"unknown policy {cache['policy']!r}") from None
    try:
        return RunConfig(model=model, cost=cost, **loader, **pred, **cache)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    return {
        "model": asdict(cfg.model),
        "cost": asdict(cfg.cost),
        "loader": {"dynamic_loading": cfg.dynamic_loading, "t1": cfg.t1, "t2": cfg.t2},
        "predictor": {
            "prefetching": cfg.prefetching, "lookahead": cfg.lookahead,
            "prefetch_precision": cfg.prefetch_precision,
        },
        "cache": {
            "policy": cfg.policy.value,
            "cap_high": cfg.cap_high,
            "cap_low": cfg.cap_low,
            "sequence_reset": cfg.sequence_reset,
            "weights": asdict(cfg.weights),
        },
    }


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return config_from_dict(d)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n", encoding="utf-8")
