"""Automatic chunk-strategy search under a peak-memory budget.

The search loop alternates four steps until the budget is met or no further
reduction is possible: profile memory, grow a candidate span around the peak
node, enumerate legal chunk regions inside the span, and pick the region and
chunk size with the lowest re-execution cost that still fits.
"""

from __future__ import annotations

import math

from .errors import InfeasibleBudgetError
from .graph import Graph
from .memory import MemoryProfile, estimate_memory
from .plans import Budget, ChunkPlan, ChunkRegion, region_io, solve_chunk_dims

MAX_CANDIDATE_REGIONS = 24
MAX_SEARCH_ROUNDS = 64
MAX_PEAKS_PER_ROUND = 12


def _peak_candidates(graph: Graph, plan: ChunkPlan,
                     profile: MemoryProfile) -> list[int]:
    """Node ids ordered by decreasing footprint, skipping graph inputs and
    nodes already inside a chunk region."""
    ranked = sorted(profile.footprints, key=lambda nf: (-nf[1], nf[0]))
    out = []
    for nid, _fp in ranked:
        if graph.nodes[nid].op == "input":
            continue
        if plan.covers(nid):
            continue
        out.append(nid)
    return out


def find_max_chunk(graph: Graph, plan: ChunkPlan, profile: MemoryProfile,
                   peak_node: int | None = None) -> tuple[int, int] | None:
    """Widest contiguous span around the peak node available for chunking.

    The span grows while the neighbouring node is dataflow-connected to it,
    stopping at existing chunk regions; inline constants are stepped over.
    peak_node defaults to the highest-footprint node not yet chunked; None
    is returned when every candidate is exhausted.
    """
    if peak_node is None:
        candidates = _peak_candidates(graph, plan, profile)
        if not candidates:
            return None
        peak_node = candidates[0]
    lo = hi = peak_node

    def blocked(nid: int) -> bool:
        return nid < 0 or nid >= len(graph.nodes) or plan.covers(nid)

    changed = True
    while changed:
        changed = False
        span = set(range(lo, hi + 1))
        cand = lo - 1
        if not blocked(cand) and any(c in span for c in graph.consumers[cand]):
            lo = cand
            changed = True
        cand = hi + 1
        if not blocked(cand):
            node = graph.nodes[cand]
            # constants declared inline are stepped over so the span can
            # keep growing past them
            if any(i in span for i in node.inputs) or (
                    node.op == "input"
                    and any(c > cand for c in graph.consumers[cand])):
                hi = cand
                changed = True
    # never end a span on a pass-through input node
    while hi > peak_node and graph.nodes[hi].op == "input":
        hi -= 1
    return lo, hi


def _boundary_ok(graph: Graph, nid: int) -> bool:
    # Cheap stage-1 filter: the node must have at least one free dim.
    node = graph.nodes[nid]
    if node.op == "input":
        return False
    flow = graph.dim_flow(node)
    return any(flow.chunkable(d) and node.shape[d] >= 2
               for d in range(len(node.shape)))


def find_possible_chunks(graph: Graph, span: tuple[int, int],
                         peak_node: int | None = None,
                         max_regions: int = MAX_CANDIDATE_REGIONS
                         ) -> list[ChunkRegion]:
    """Enumerate legal chunk regions within the span that cover the peak.

    Stage 1 screens sub-span boundaries by whether they expose any free
    dimension at all; stage 2 runs the full dimension-flow propagation for
    each chunkable dim of the first region output.  Wider sub-spans are
    tried first.
    """
    lo, hi = span
    if peak_node is None:
        peak_node = (lo + hi) // 2
    regions: list[ChunkRegion] = []
    seen: set[tuple] = set()
    for e in range(hi, peak_node - 1, -1):
        if not _boundary_ok(graph, e):
            continue
        for s in range(lo, peak_node + 1):
            if not _boundary_ok(graph, s):
                continue
            outputs, _ = region_io(graph, s, e)
            if not outputs:
                continue
            first = graph.nodes[outputs[0]]
            flow = graph.dim_flow(first)
            for d in range(len(first.shape)):
                if not flow.chunkable(d) or first.shape[d] < 2:
                    continue
                region = solve_chunk_dims(graph, s, e, outputs[0], d)
                if region is None:
                    continue
                key = (s, e, frozenset(region.chunk_dim.items()))
                if key in seen:
                    continue
                seen.add(key)
                regions.append(region)
                if len(regions) >= max_regions:
                    return regions
    return regions


def _peak_with(graph: Graph, plan: ChunkPlan, region: ChunkRegion, size: int,
               element_size: int) -> int:
    trial = ChunkPlan(regions=list(plan.regions))
    trial.add(region, size)
    return estimate_memory(graph, trial, element_size).peak_bytes


def find_best_chunk(graph: Graph, plan: ChunkPlan, budget: int,
                    candidates: list[ChunkRegion],
                    current_peak: int | None = None,
                    element_size: int = 8
                    ) -> tuple[ChunkRegion, int, int] | None:
    """Pick (region, chunk_size, resulting peak) with minimal re-execution
    cost among candidates that fit the budget.

    Per region the largest fitting chunk size is found by a halving scan
    followed by a linear refinement of the boundary.  If nothing fits, the
    size-1 configuration with the lowest peak is kept as a fallback.  Ties
    break toward the larger peak reduction, then the earlier region.
    """
    if current_peak is None:
        current_peak = estimate_memory(graph, plan, element_size).peak_bytes
    best = None
    for region in candidates:
        extent = region.extent
        chosen = None
        size = extent // 2
        while size >= 1:
            peak = _peak_with(graph, plan, region, size, element_size)
            if peak <= budget:
                chosen = (size, peak)
                break
            size //= 2
        if chosen is not None:
            # Refine upward: the halving scan may have overshot the largest
            # size that still fits.
            size, peak = chosen
            for s in range(min(extent, 2 * size - 1), size, -1):
                p = _peak_with(graph, plan, region, s, element_size)
                if p <= budget:
                    chosen = (s, p)
                    break
        else:
            peak1 = _peak_with(graph, plan, region, 1, element_size)
            chosen = (1, peak1)
        size, peak = chosen
        if peak >= current_peak:
            continue
        cost = math.ceil(extent / size)
        # Candidates that meet the budget compete on re-execution cost;
        # otherwise maximize the reduction so the search keeps moving.
        if peak <= budget:
            key = (0, cost, peak, region.start)
        else:
            key = (1, peak, cost, region.start)
        if best is None or key < best[0]:
            best = (key, region, size, peak)
    if best is None:
        return None
    return best[1], best[2], best[3]


def autochunk_search(graph: Graph, budget: Budget | int,
                     element_size: int = 8) -> ChunkPlan:
    """Search for a chunk plan whose estimated peak fits the budget.

    Regions are added greedily around successive peak nodes; each round must
    strictly reduce the peak.  Raises InfeasibleBudgetError when the search
    exhausts its moves above budget, reporting the best peak achieved.
    """
    limit = budget.max_peak_bytes if isinstance(budget, Budget) else int(budget)
    Budget(limit)  # validates positivity
    plan = ChunkPlan()
    for _ in range(MAX_SEARCH_ROUNDS):
        profile = estimate_memory(graph, plan, element_size)
        if profile.peak_bytes <= limit:
            return plan
        step = None
        for peak_node in _peak_candidates(graph, plan, profile)[:MAX_PEAKS_PER_ROUND]:
            span = find_max_chunk(graph, plan, profile, peak_node)
            candidates = find_possible_chunks(graph, span, peak_node)
            step = find_best_chunk(graph, plan, limit, candidates,
                                   profile.peak_bytes, element_size)
            if step is not None:
                break
        if step is None:
            break
        region, size, peak = step
        plan.add(region, size)
        plan.provenance.append({
            "start": region.start,
            "end": region.end,
            "chunk_size": size,
            "extent": region.extent,
            "peak_after": peak,
        })
    final = estimate_memory(graph, plan, element_size)
    if final.peak_bytes > limit:
        raise InfeasibleBudgetError(limit, final.peak_bytes)
    return plan
