"""Exact peak-memory estimation for graphs, with or without a chunk plan.

The liveness protocol matches the tracked executors byte for byte: when a
node runs, its output buffer is allocated first, the footprint is recorded
(so a node's inputs are still live at its own footprint), and only then are
input buffers whose last consumer is that node released.

Inside a chunk region the full-size output buffers are allocated up front,
in-region nodes on the flow path hold slice-sized buffers, region inputs are
read through untracked views, and region input buffers that die inside the
region are released only after the whole region finishes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .graph import Graph, shape_bytes
from .plans import ChunkPlan, validate_plan


@dataclass(frozen=True)
class MemoryProfile:
    """Per-node footprints in bytes plus the overall peak."""

    footprints: list[tuple[int, int]]   # (node id, live bytes after it runs)
    peak_bytes: int
    peak_node_id: int
    element_size: int = 8

    def fraction_below(self, fraction: float) -> float:
        """Share of recorded footprints strictly below fraction * peak."""
        if not self.footprints:
            return 1.0
        cut = fraction * self.peak_bytes
        below = sum(1 for _, fp in self.footprints if fp < cut)
        return below / len(self.footprints)

    def to_json(self) -> str:
        return json.dumps({
            "schema": "evoplan-memprofile-v1",
            "element_size": self.element_size,
            "peak_bytes": self.peak_bytes,
            "peak_node_id": self.peak_node_id,
            "footprints": [[n, fp] for n, fp in self.footprints],
        }, sort_keys=True)


def footprint_stats(profile: MemoryProfile, fraction: float) -> dict:
    """Summarize how flat the footprint curve is below fraction * peak."""
    return {
        "peak_bytes": profile.peak_bytes,
        "peak_node_id": profile.peak_node_id,
        "fraction": fraction,
        "fraction_below": profile.fraction_below(fraction),
        "n_footprints": len(profile.footprints),
    }


def _slice_bytes(shape: tuple[int, ...], dim: int, size: int,
                 element_size: int) -> int:
    sl = list(shape)
    sl[dim] = min(size, shape[dim])
    return shape_bytes(tuple(sl), element_size)


def estimate_memory(graph: Graph, plan: ChunkPlan | None = None,
                    element_size: int = 8) -> MemoryProfile:
    """Simulate buffer liveness and return the exact footprint profile.

    The result matches the tracked executor for the same graph and plan
    exactly (same protocol, same byte counts).
    """
    if plan is None:
        plan = ChunkPlan()
    validate_plan(graph, plan)

    last = graph.last_consumer()
    graph_outputs = set(graph.outputs)
    region_at = {r.start: (r, s) for r, s in plan.regions}

    live: dict[int, int] = {}
    footprints: list[tuple[int, int]] = []
    peak = 0
    peak_node = -1

    def record(nid: int, extra: int = 0) -> None:
        nonlocal peak, peak_node
        fp = sum(live.values()) + extra
        footprints.append((nid, fp))
        if fp > peak:
            peak = fp
            peak_node = nid

    nid = 0
    while nid < len(graph.nodes):
        if nid in region_at:
            region, size = region_at[nid]
            span = set(region.span)
            for out in region.outputs:
                live[out] = shape_bytes(graph.nodes[out].shape, element_size)
            # Pass-through inputs declared inside the span are allocated on
            # region entry so later iterations see them from the start.
            for sid in region.span:
                if graph.nodes[sid].op == "input":
                    live[sid] = shape_bytes(graph.nodes[sid].shape,
                                            element_size)
            # One iteration's liveness is representative: every iteration
            # allocates the same slice-sized buffers over the same schedule.
            internal: dict[int, int] = {}
            for sid in region.span:
                node = graph.nodes[sid]
                if node.op == "input":
                    continue  # allocated on region entry
                if sid in region.outputs:
                    pass  # writes through a view of the preallocated buffer
                elif sid in region.chunk_dim:
                    internal[sid] = _slice_bytes(
                        node.shape, region.chunk_dim[sid], size, element_size)
                else:
                    internal[sid] = shape_bytes(node.shape, element_size)
                record(sid, extra=sum(internal.values()))
                for inp in node.inputs:
                    if inp in internal and last.get(inp) == sid:
                        del internal[inp]
            # Region inputs whose last consumer sits inside the span die here.
            for buf in list(live):
                lc = last.get(buf)
                if lc is not None and lc in span and buf not in graph_outputs \
                        and buf not in region.outputs:
                    del live[buf]
            nid = region.end + 1
        else:
            node = graph.nodes[nid]
            live[nid] = shape_bytes(node.shape, element_size)
            record(nid)
            for inp in set(node.inputs):
                if last.get(inp) == nid and inp not in graph_outputs:
                    live.pop(inp, None)
            nid += 1

    return MemoryProfile(footprints, peak, peak_node, element_size)
