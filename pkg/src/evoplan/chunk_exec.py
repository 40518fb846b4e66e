"""Chunked graph execution under a chunk plan.

Byte accounting mirrors :func:`evoplan.memory.estimate_memory` exactly:
region outputs are allocated full size up front, in-region flow-path nodes
hold slice-sized tracked buffers, region inputs are read through untracked
views, and region input buffers that die inside a region are released only
once the region finishes.
"""

from __future__ import annotations

import math

import numpy as np

from . import engine
from .errors import DimensionError
from .graph import Graph, apply_node
from .plans import ChunkPlan, ChunkRegion, validate_plan


def _axis_slice(arr: np.ndarray, dim: int, lo: int, hi: int) -> np.ndarray:
    idx = [slice(None)] * arr.ndim
    idx[dim] = slice(lo, hi)
    return arr[tuple(idx)]


def _run_region(graph: Graph, region: ChunkRegion, size: int,
                tensors: dict[int, engine.Tensor],
                last: dict[int, int], fetch) -> None:
    for out in region.outputs:
        tensors[out] = engine.Tensor(
            np.empty(graph.nodes[out].shape, dtype=np.float64))
    # pass-through inputs declared inside the span are allocated on entry
    for sid in region.span:
        if graph.nodes[sid].op == "input":
            tensors[sid] = engine.Tensor(fetch(sid))

    n_iter = math.ceil(region.extent / size)
    for it in range(n_iter):
        lo = it * size
        hi = min(region.extent, lo + size)
        internal: dict[int, engine.Tensor] = {}

        def value_of(nid: int) -> np.ndarray:
            if nid in internal:
                return internal[nid].data
            base = tensors[nid].data
            if nid in region.chunk_dim and region.start <= nid <= region.end:
                # region output produced earlier in this span: read the
                # current slice of the preallocated buffer
                return _axis_slice(base, region.chunk_dim[nid], lo, hi)
            if nid in region.input_chunk:
                return _axis_slice(base, region.input_chunk[nid], lo, hi)
            return base

        for sid in region.span:
            node = graph.nodes[sid]
            if node.op == "input":
                continue  # allocated on region entry
            raw = apply_node(node, [value_of(i) for i in node.inputs])
            if sid in region.outputs:
                dest = _axis_slice(tensors[sid].data,
                                   region.chunk_dim[sid], lo, hi)
                dest[...] = raw
            else:
                internal[sid] = engine.Tensor(raw)
            for inp in node.inputs:
                if inp in internal and last.get(inp) == sid:
                    internal[inp].free()
                    del internal[inp]
        for t in internal.values():  # defensive: span outputs cover the rest
            t.free()


def execute_chunked(graph: Graph, plan: ChunkPlan,
                    inputs: dict[int, np.ndarray],
                    allocator: engine.Allocator | None = None
                    ) -> dict[int, np.ndarray]:
    """Run the graph under the plan; returns {output id: array}.

    With an allocator the measured peak equals the estimator's prediction
    for the same graph and plan.
    """
    validate_plan(graph, plan)
    missing = [i for i in graph.runtime_inputs if i not in inputs]
    if missing:
        raise DimensionError(f"missing runtime inputs: {missing}")
    if allocator is None:
        allocator = engine.Allocator()

    last = graph.last_consumer()
    graph_outputs = set(graph.outputs)
    region_at = {r.start: (r, s) for r, s in plan.regions}

    with engine.use_allocator(allocator):
        tensors: dict[int, engine.Tensor] = {}
        nid = 0
        while nid < len(graph.nodes):
            if nid in region_at:
                region, size = region_at[nid]

                def fetch(sid: int) -> np.ndarray:
                    return graph.consts.get(sid, inputs.get(sid))

                _run_region(graph, region, size, tensors, last, fetch)
                span = set(region.span)
                for buf in list(tensors):
                    lc = last.get(buf)
                    if lc is not None and lc in span \
                            and buf not in graph_outputs \
                            and buf not in region.outputs \
                            and (buf not in span
                                 or graph.nodes[buf].op == "input"):
                        tensors[buf].free()
                nid = region.end + 1
            else:
                node = graph.nodes[nid]
                if node.op == "input":
                    src = graph.consts.get(node.id, inputs.get(node.id))
                    tensors[nid] = engine.Tensor(src)
                else:
                    raw = apply_node(node,
                                     [tensors[i].data for i in node.inputs])
                    tensors[nid] = engine.Tensor(raw)
                for i in node.inputs:
                    if last.get(i) == nid and i not in graph_outputs:
                        tensors[i].free()
                nid += 1
        return {i: tensors[i].data for i in graph.outputs}
