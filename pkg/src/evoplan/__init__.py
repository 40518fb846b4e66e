"""Desk-scale planning toolkit for sharded and chunked evoformer execution.

Three capabilities, all simulated in-process with numpy:

  * an axially sharded evoformer block over a virtual device mesh, with
    exact per-device byte ledgers for every collective;
  * closed-form communication volume models (tensor-style vs axial
    sharding) and a compute/communication overlap scheduler;
  * automatic chunk-plan search over a traced computation graph under a
    peak-memory budget, with an estimator that matches execution exactly.
"""

from .chunk_exec import execute_chunked
from .chunker import autochunk_search, find_best_chunk, find_max_chunk, find_possible_chunks
from .commcost import CommModel, VolumeReport, activation_memory, predict_block_ledger
from .dap_block import dap_evoformer_block
from .engine import AllocStats, Allocator, Tensor, use_allocator
from .errors import (
    DimensionError,
    DomainError,
    EvoplanError,
    GraphFormatError,
    HeadLimitError,
    InfeasibleBudgetError,
    MeshError,
    PlanError,
    ScheduleError,
    ShardError,
)
from .evoformer import (
    EvoConfig,
    evoformer_block,
    init_block_params,
    params_from_json,
    params_to_json,
)
from .fusion import fuse_elementwise, fuse_merge_gemm
from .graph import Graph, GraphBuilder, execute, graph_from_json, graph_to_json
from .memory import MemoryProfile, estimate_memory, footprint_stats
from .plans import Budget, ChunkPlan, ChunkRegion, plan_from_json, plan_to_json
from .scheduling import ScheduleResult, TimelineEvent, simulate_schedule
from .sharding import (
    CommLedger,
    DeviceMesh,
    ShardedTensor,
    all_gather,
    all_to_all_switch_axis,
    ring_all_reduce,
    shard,
    unshard,
)
from .trace import trace_evoformer

__version__ = "0.1.0"

__all__ = [
    "AllocStats", "Allocator", "Budget", "ChunkPlan", "ChunkRegion",
    "CommLedger", "CommModel", "DeviceMesh", "DimensionError", "DomainError",
    "EvoConfig", "EvoplanError", "Graph", "GraphBuilder", "GraphFormatError",
    "HeadLimitError", "InfeasibleBudgetError", "MemoryProfile", "MeshError",
    "PlanError", "ScheduleError", "ScheduleResult", "ShardError",
    "ShardedTensor", "Tensor", "TimelineEvent", "VolumeReport",
    "activation_memory", "all_gather", "all_to_all_switch_axis",
    "autochunk_search", "dap_evoformer_block", "estimate_memory",
    "evoformer_block", "execute", "execute_chunked", "find_best_chunk",
    "find_max_chunk", "find_possible_chunks", "footprint_stats",
    "fuse_elementwise", "fuse_merge_gemm", "graph_from_json", "graph_to_json",
    "init_block_params", "params_from_json", "params_to_json",
    "plan_from_json", "plan_to_json", "predict_block_ledger",
    "ring_all_reduce", "shard", "simulate_schedule", "trace_evoformer",
    "unshard", "use_allocator",
]
