"""Chunk regions, chunk plans and their serialized execution documents.

A chunk region is a contiguous execution-order span re-executed slice by
slice along one free dimension.  Legality follows three rules:

  1. every region output has a chunk dimension;
  2. the chunk-dimension assignment is closed under the dimension-flow
     relation (every dim on the flow path is chunked);
  3. every chunked dimension is free (never a COMPUTE dimension).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import GraphFormatError, PlanError
from .graph import Graph


@dataclass(frozen=True)
class Budget:
    max_peak_bytes: int

    def __post_init__(self) -> None:
        if self.max_peak_bytes <= 0:
            raise PlanError("budget must be positive")


@dataclass
class ChunkRegion:
    start: int
    end: int                      # inclusive
    chunk_dim: dict[int, int]     # node id -> chunked output dim (flow path)
    input_chunk: dict[int, int]   # region-input node id -> chunked dim
    outputs: list[int]
    extent: int

    @property
    def span(self) -> range:
        return range(self.start, self.end + 1)

    @property
    def output_chunk(self) -> dict[int, int]:
        return {o: self.chunk_dim[o] for o in self.outputs}


@dataclass
class ChunkPlan:
    regions: list[tuple[ChunkRegion, int]] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)

    def add(self, region: ChunkRegion, chunk_size: int) -> None:
        self.regions.append((region, chunk_size))
        self.regions.sort(key=lambda rs: rs[0].start)

    def covers(self, node_id: int) -> bool:
        return any(r.start <= node_id <= r.end for r, _ in self.regions)


def region_io(graph: Graph, start: int, end: int) -> tuple[list[int], list[int]]:
    """(outputs, inputs) of the execution-order span [start, end]."""
    span = set(range(start, end + 1))
    outputs, inputs = [], []
    graph_outputs = set(graph.outputs)
    for nid in sorted(span):
        node = graph.nodes[nid]
        for i in node.inputs:
            if i not in span and i not in inputs:
                inputs.append(i)
        if node.op == "input":
            continue
        if nid in graph_outputs or any(c not in span for c in graph.consumers[nid]):
            outputs.append(nid)
    return outputs, inputs


def solve_chunk_dims(graph: Graph, start: int, end: int,
                     seed_node: int, seed_dim: int) -> ChunkRegion | None:
    """Propagate a chunk-dimension choice through the span; None if illegal.

    Starting from (seed_node, seed_dim) the assignment is pushed upward
    through each node's dimension-flow sources and downward into every
    in-span consumer, rejecting any path that reaches a COMPUTE dimension.
    """
    # Input/const nodes inside the span are pass-through region inputs:
    # they are allocated full size and sliced through views, never executed
    # per chunk.
    span = {nid for nid in range(start, end + 1)
            if graph.nodes[nid].op != "input"}
    outputs, _inputs = region_io(graph, start, end)
    if not outputs:
        return None

    assign: dict[int, int] = {}
    input_assign: dict[int, int] = {}
    work = [(seed_node, seed_dim)]
    while work:
        nid, d = work.pop()
        if nid in span:
            if assign.get(nid, d) != d:
                return None
            if nid in assign:
                continue
            node = graph.nodes[nid]
            if d >= len(node.shape):
                return None
            flow = graph.dim_flow(node)
            if not flow.chunkable(d):
                return None
            assign[nid] = d
            for (i, di) in flow.sources(d):
                work.append((node.inputs[i], di))
        else:
            if input_assign.get(nid, d) != d:
                return None
            if nid in input_assign:
                continue
            input_assign[nid] = d
        # A chunked buffer forces every in-span consumer to chunk the
        # dimension it flows into.
        for cid in graph.consumers[nid]:
            if cid not in span:
                continue
            consumer = graph.nodes[cid]
            cflow = graph.dim_flow(consumer)
            for i, inp in enumerate(consumer.inputs):
                if inp != nid:
                    continue
                # Broadcast operands of extent 1 are replicated, not sliced.
                in_shape = graph.nodes[nid].shape
                offset = len(consumer.shape) - len(in_shape)
                dest = cflow.in_dest(i, d)
                if dest == "compute":
                    if offset >= 0 and d + offset < len(consumer.shape) and \
                            in_shape[d] == 1:
                        continue
                    return None
                if (cid, dest) not in [(k, v) for k, v in assign.items()]:
                    work.append((cid, dest))

    if any(o not in assign for o in outputs):
        return None
    extents = {graph.nodes[n].shape[d] for n, d in assign.items()}
    extents |= {graph.nodes[n].shape[d] for n, d in input_assign.items()}
    if len(extents) != 1:
        return None
    extent = extents.pop()
    if extent < 2:
        return None
    return ChunkRegion(start, end, assign, input_assign, outputs, extent)


def validate_plan(graph: Graph, plan: ChunkPlan) -> None:
    """Re-derive every region's legality; raise PlanError on violation."""
    prev_end = -1
    for region, size in sorted(plan.regions, key=lambda rs: rs[0].start):
        if region.start <= prev_end:
            raise PlanError(
                f"region starting at node {region.start} overlaps the "
                f"previous region")
        prev_end = region.end
        if not (0 <= region.start <= region.end < len(graph.nodes)):
            raise PlanError(f"region [{region.start}, {region.end}] out of range")
        seed = region.outputs[0]
        seed_dim = region.chunk_dim.get(seed)
        if seed_dim is None:
            raise PlanError(f"region output node {seed} has no chunk dimension")
        solved = solve_chunk_dims(graph, region.start, region.end, seed, seed_dim)
        if solved is None:
            raise PlanError(
                f"chunk assignment for node {seed} dim {seed_dim} is illegal")
        if solved.chunk_dim != region.chunk_dim or \
                solved.input_chunk != region.input_chunk or \
                solved.outputs != region.outputs:
            raise PlanError(
                f"region [{region.start}, {region.end}] is not closed under "
                f"the dimension-flow relation")
        if not (1 <= size <= region.extent):
            raise PlanError(
                f"chunk size {size} invalid for extent {region.extent} in "
                f"region [{region.start}, {region.end}]")


# ---------------------------------------------------------------------------
# Execution-plan documents
# ---------------------------------------------------------------------------

PLAN_SCHEMA = "evoplan-execplan-v1"


def plan_codegen(graph: Graph, plan: ChunkPlan) -> dict:
    """Emit a self-contained execution recipe for the graph under the plan.

    The schedule is a flat list of node ids with loop constructs standing in
    for chunk regions; an empty plan degenerates to plain topological order.
    """
    validate_plan(graph, plan)
    schedule: list = []
    region_at = {r.start: (r, s) for r, s in plan.regions}
    nid = 0
    while nid < len(graph.nodes):
        if nid in region_at:
            region, size = region_at[nid]
            schedule.append({"loop": {
                "start": region.start,
                "end": region.end,
                "dim_extent": region.extent,
                "chunk_size": size,
                "iterations": math.ceil(region.extent / size),
                "nodes": list(region.span),
                "chunk_dim": {str(k): v for k, v in region.chunk_dim.items()},
                "slice_specs": {str(k): v for k, v in region.input_chunk.items()},
                "scatter_specs": {str(k): region.chunk_dim[k]
                                  for k in region.outputs},
            }})
            nid = region.end + 1
        else:
            schedule.append(nid)
            nid += 1
    return {
        "schema": PLAN_SCHEMA,
        "n_nodes": len(graph.nodes),
        "schedule": schedule,
        "provenance": plan.provenance,
    }


def plan_to_json(graph: Graph, plan: ChunkPlan) -> str:
    return json.dumps(plan_codegen(graph, plan), sort_keys=True)


def plan_from_document(doc: dict) -> ChunkPlan:
    """Rebuild a ChunkPlan from an execution-plan document."""
    if doc.get("schema") != PLAN_SCHEMA:
        raise GraphFormatError(f"unexpected plan schema {doc.get('schema')!r}")
    plan = ChunkPlan(provenance=list(doc.get("provenance", [])))
    for entry in doc["schedule"]:
        if isinstance(entry, dict):
            loop = entry["loop"]
            region = ChunkRegion(
                start=loop["start"],
                end=loop["end"],
                chunk_dim={int(k): v for k, v in loop["chunk_dim"].items()},
                input_chunk={int(k): v for k, v in loop["slice_specs"].items()},
                outputs=[int(k) for k in loop["scatter_specs"]],
                extent=loop["dim_extent"],
            )
            plan.add(region, loop["chunk_size"])
    return plan


def plan_from_json(text: str) -> ChunkPlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(
            f"malformed plan JSON at line {exc.lineno} column {exc.colno}: "
            f"{exc.msg}") from exc
    return plan_from_document(doc)
