"""Trace-driven simulator for mixed-precision MoE expert offloading.

Token-level precision selection, layer-level lookahead prefetching and
sequence-level weighted caching, priced over a two-level memory cost model.
"""

from .cache import CacheState, CapacityError, Policy, PolicyWeights, PriorityRecord, priority
from .engine import (
    LayerRow,
    RunConfig,
    SimReport,
    Simulator,
    TokenRow,
    TraceMismatchError,
    calibrate_weights,
    run,
    simplex_grid,
)
from .gating import (
    Decision,
    GateMatrix,
    GateOutcome,
    classify_precision,
    compute_gate,
    unimportance_scores,
)
from .loader import LoadTask, TaskKind, TransferChannel, channel_step, enqueue_prefetch, on_miss_tasks
from .model import (
    ConfigError,
    CostModel,
    ExpertKey,
    ModelSpec,
    Precision,
    PrecisionLevel,
    load_time,
    miss_penalty,
)
from .predictor import LookaheadPrediction, adaptive_predict, stacked_lookahead, top1_accuracy
from .tracegen import (
    ProxySpec,
    ToyExpert,
    Trace,
    TraceSpec,
    UndefinedCorrelationError,
    generate,
    proxy_correlation,
    toy_expert_eval,
)

__version__ = "0.1.0"
