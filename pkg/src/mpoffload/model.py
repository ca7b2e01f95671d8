"""Shared vocabulary: model shape, precision levels, expert identity, cost model."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class Precision(str, enum.Enum):
    HIGH = "high"
    LOW = "low"


class ExpertKey(NamedTuple):
    """An expert identified by its layer and index within that layer.

    Tuple ordering doubles as the lexicographic tie-break used by eviction.
    """

    layer: int
    expert: int

    def __str__(self) -> str:
        return f"L{self.layer}E{self.expert}"


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int = 32
    n_experts_per_layer: int = 8
    top_k: int = 2
    d_model: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model < 1:
            raise ConfigError(f"d_model must be >= 1, got {self.d_model}")
        if not 1 <= self.top_k <= self.n_experts_per_layer:
            raise ConfigError(
                f"top_k must lie in [1, {self.n_experts_per_layer}], got {self.top_k}"
            )

    @property
    def n_experts_total(self) -> int:
        return self.n_layers * self.n_experts_per_layer

    def check_key(self, key: ExpertKey) -> None:
        if not (0 <= key.layer < self.n_layers and 0 <= key.expert < self.n_experts_per_layer):
            raise ConfigError(f"{key} out of range for {self}")


@dataclass(frozen=True)
class PrecisionLevel:
    tag: Precision
    bit_width: int


@dataclass(frozen=True)
class CostModel:
    """Prices transfers and compute in abstract milliseconds.

    Defaults follow a PCIe 4.0 / fp16+int4 regime: a 0.328 GB expert moves in
    10.25 ms over a 32 GB/s link, and one layer computes in 3 ms with top-2
    (1.95 attention + 0.05 gate + 2 x 0.5 expert).
    """

    bandwidth_bytes_per_ms: float = 32e6
    expert_bytes_high: float = 328e6
    expert_bytes_low: float | None = None
    high_bits: int = 16
    low_bits: int = 4
    attn_compute_ms: float = 1.95
    expert_compute_ms: float = 0.5
    gate_compute_ms: float = 0.05
    preemptible_transfers: bool = False

    def __post_init__(self):
        if self.expert_bytes_low is None:
            object.__setattr__(
                self, "expert_bytes_low", self.expert_bytes_high * self.low_bits / self.high_bits
            )
        if not 0 < self.low_bits < self.high_bits:
            raise ConfigError(
                f"need 0 < low_bits < high_bits, got {self.low_bits}/{self.high_bits}"
            )
        if self.bandwidth_bytes_per_ms <= 0:
            raise ConfigError("bandwidth_bytes_per_ms must be positive")
        if self.expert_bytes_high <= 0 or self.expert_bytes_low <= 0:
            raise ConfigError("expert byte sizes must be positive")
        for name in ("attn_compute_ms", "expert_compute_ms", "gate_compute_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        ratio = self.expert_bytes_low / self.expert_bytes_high
        if not math.isclose(ratio, self.bit_ratio, rel_tol=0.0, abs_tol=1e-9):
            raise ConfigError(
                f"byte ratio {ratio} does not track bit ratio {self.bit_ratio}"
            )
        if self.preemptible_transfers:
            raise ConfigError("transfers are never preemptible")

    @property
    def bit_ratio(self) -> float:
        return self.low_bits / self.high_bits

    def level(self, precision: Precision) -> PrecisionLevel:
        bits = self.high_bits if precision is Precision.HIGH else self.low_bits
        return PrecisionLevel(precision, bits)

    def expert_bytes(self, precision: Precision) -> float:
        if precision is Precision.HIGH:
            return self.expert_bytes_high
        return self.expert_bytes_low

    def layer_compute_ms(self, n_active: int) -> float:
        return self.attn_compute_ms + self.gate_compute_ms + self.expert_compute_ms * n_active


def load_time(precision: Precision, cost: CostModel) -> float:
    """Milliseconds to move one expert of the given precision over the link."""
    if precision is Precision.HIGH:
        return cost.expert_bytes_high / cost.bandwidth_bytes_per_ms
    # derived from the high-precision time so Low == High * B_l/B_h holds exactly
    return load_time(Precision.HIGH, cost) * cost.bit_ratio


def miss_penalty(precision: Precision, cost: CostModel) -> float:
    """Unitless miss cost, normalized so a high-precision miss costs 1."""
    if precision is Precision.HIGH:
        return 1.0
    return cost.bit_ratio
