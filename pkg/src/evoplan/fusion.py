"""Graph rewrites that reduce kernel count without changing results.

Two rewrites are provided:

  * merge-GEMM: projections that share an input (attention q/k/v and their
    biases) are concatenated into one wide matmul plus per-consumer slices;
  * elementwise fusion: single-consumer chains of add/mul/sigmoid/relu
    collapse into one fused node whose intermediates are never tracked.

Each rewrite is accepted per match only when the estimated peak memory does
not increase, so fusing is always safe to apply blindly.
"""

from __future__ import annotations

import numpy as np

from .graph import Graph, GraphBuilder, Node

ELEMENTWISE_OPS = ("add", "mul", "sigmoid", "relu")


def _rebuild(graph: Graph, drop: set[int], inject: dict[int, list],
             remap_out: dict[int, str]) -> Graph:
    """Rebuild the graph without nodes in ``drop``.

    inject[nid] is a list of recipe dicts emitted right before old node nid;
    a recipe may carry a "tag" so later old nodes can reference it via
    remap_out (old node id -> tag).
    """
    b = GraphBuilder()
    mapping: dict[int, int] = {}
    tags: dict[str, int] = {}

    def resolve(old_id: int) -> int:
        if old_id in remap_out:
            return tags[remap_out[old_id]]
        return mapping[old_id]

    def emit(recipes: list) -> None:
        for r in recipes:
            if r["kind"] == "const":
                new_id = b.const(r["value"], name=r.get("name", ""))
            else:
                new_id = b.add_node(
                    r["op"], [resolve(i) for i in r["inputs"]],
                    r.get("attrs"), name=r.get("name", ""))
            if "tag" in r:
                tags[r["tag"]] = new_id

    for node in graph.nodes:
        if node.id in inject:
            emit(inject[node.id])
        if node.id in drop:
            continue
        if node.op == "input":
            if node.id in graph.consts:
                mapping[node.id] = b.const(graph.consts[node.id], node.name)
            else:
                mapping[node.id] = b.input(node.shape, node.name)
        else:
            mapping[node.id] = b.add_node(
                node.op, [resolve(i) for i in node.inputs], node.attrs,
                node.name)
    new = b.build([resolve(o) for o in graph.outputs])
    return prune_unused_consts(new)


def prune_unused_consts(graph: Graph) -> Graph:
    """Drop constant input nodes that nothing consumes and renumber."""
    keep = [n for n in graph.nodes
            if n.id not in graph.consts or graph.consumers[n.id]
            or n.id in graph.outputs]
    if len(keep) == len(graph.nodes):
        return graph
    b = GraphBuilder()
    mapping: dict[int, int] = {}
    for node in keep:
        if node.op == "input":
            if node.id in graph.consts:
                mapping[node.id] = b.const(graph.consts[node.id], node.name)
            else:
                mapping[node.id] = b.input(node.shape, node.name)
        else:
            mapping[node.id] = b.add_node(
                node.op, [mapping[i] for i in node.inputs], node.attrs,
                node.name)
    return b.build([mapping[o] for o in graph.outputs])


def _peak(graph: Graph, element_size: int = 8) -> int:
    from .memory import estimate_memory
    return estimate_memory(graph, element_size=element_size).peak_bytes


# ---------------------------------------------------------------------------
# Merge-GEMM
# ---------------------------------------------------------------------------


def _is_plain_linear(graph: Graph, node: Node) -> bool:
    if node.op != "linear" or node.attrs.get("contract_dims", 1) != 1:
        return False
    w_id = node.inputs[1]
    return w_id in graph.consts and graph.consts[w_id].ndim == 2


def _linear_bias_pairs(graph: Graph) -> dict[int, list[tuple[int, int]]]:
    """Group (linear, bias-add) pairs by their shared data input."""
    groups: dict[int, list[tuple[int, int]]] = {}
    for node in graph.nodes:
        if not _is_plain_linear(graph, node) or node.id in graph.outputs:
            continue
        cons = graph.consumers[node.id]
        if len(cons) != 1:
            continue
        badd = graph.nodes[cons[0]]
        if badd.op != "add" or badd.inputs[0] != node.id:
            continue
        bias_id = badd.inputs[1]
        if bias_id not in graph.consts or graph.consts[bias_id].ndim != 1:
            continue
        groups.setdefault(node.inputs[0], []).append((node.id, badd.id))
    return {x: ps for x, ps in groups.items() if len(ps) >= 2}


def fuse_merge_gemm(graph: Graph, element_size: int = 8) -> Graph:
    """Merge same-input projections into one wide matmul plus slices.

    k (linear, bias) pairs become one linear, one add and k slices, so the
    node count never grows for k >= 2.  A merge is kept only if the
    estimated peak does not increase.
    """
    current = graph
    base_peak = _peak(current, element_size)
    changed = True
    while changed:
        changed = False
        for x_id, pairs in sorted(_linear_bias_pairs(current).items()):
            w_cat = np.concatenate(
                [current.consts[current.nodes[lin].inputs[1]]
                 for lin, _ in pairs], axis=1)
            b_cat = np.concatenate(
                [current.consts[current.nodes[badd].inputs[1]]
                 for _, badd in pairs])
            anchor = min(lin for lin, _ in pairs)
            recipes: list = [
                {"kind": "const", "value": w_cat, "name": "merged/w",
                 "tag": "w"},
                {"kind": "const", "value": b_cat, "name": "merged/b",
                 "tag": "b"},
                {"kind": "node", "op": "linear", "inputs": [x_id, -1],
                 "name": "merged.linear", "tag": "lin"},
                {"kind": "node", "op": "add", "inputs": [-2, -3],
                 "name": "merged.bias", "tag": "badd"},
            ]
            # placeholder input ids -1/-2/-3 refer to tags w/lin/b
            remap = {-1: "w", -2: "lin", -3: "b"}
            rank = len(current.nodes[pairs[0][0]].shape)
            offset = 0
            drop: set[int] = set()
            remap_out: dict[int, str] = {}
            for idx, (lin, badd) in enumerate(pairs):
                width = current.nodes[lin].shape[-1]
                tag = f"slice{idx}"
                recipes.append({
                    "kind": "node", "op": "slice", "inputs": [-4],
                    "attrs": {"axis": rank - 1, "start": offset,
                              "stop": offset + width},
                    "name": current.nodes[badd].name, "tag": tag,
                })
                offset += width
                drop.update((lin, badd))
                remap_out[badd] = tag
            remap[-4] = "badd"
            remap_out.update({k: v for k, v in remap.items()})
            trial = _rebuild(current, drop, {anchor: recipes}, remap_out)
            if _peak(trial, element_size) <= base_peak:
                current = trial
                base_peak = _peak(current, element_size)
                changed = True
                break
    return current


# ---------------------------------------------------------------------------
# Elementwise fusion
# ---------------------------------------------------------------------------


def _elementwise_chains(graph: Graph) -> list[list[int]]:
    """Maximal single-consumer chains of elementwise nodes, earliest first."""
    outputs = set(graph.outputs)
    in_chain: set[int] = set()
    chains = []
    for node in graph.nodes:
        if node.op not in ELEMENTWISE_OPS or node.id in in_chain:
            continue
        chain = [node.id]
        cur = node
        while True:
            cons = graph.consumers[cur.id]
            if cur.id in outputs or len(cons) != 1:
                break
            nxt = graph.nodes[cons[0]]
            if nxt.op not in ELEMENTWISE_OPS:
                break
            # the running value must feed the next step directly
            if chain[-1] not in nxt.inputs:
                break
            chain.append(nxt.id)
            cur = nxt
        if len(chain) >= 2:
            chains.append(chain)
            in_chain.update(chain)
    return chains


def fuse_elementwise(graph: Graph, element_size: int = 8) -> Graph:
    """Collapse elementwise chains into single fused nodes.

    Intermediate values of a fused chain live only as untracked kernel
    temporaries.  A chain is kept fused only when the estimated peak does
    not increase.
    """
    current = graph
    base_peak = _peak(current, element_size)
    changed = True
    while changed:
        changed = False
        for chain in _elementwise_chains(current):
            head_node = current.nodes[chain[0]]
            ext_inputs = list(head_node.inputs)
            steps = []
            if head_node.op in ("sigmoid", "relu"):
                head_slot = 0
                steps.append({"op": head_node.op})
            else:
                head_slot = 0
                steps.append({"op": head_node.op, "operand": 1})
            prev = chain[0]
            for nid in chain[1:]:
                node = current.nodes[nid]
                if node.op in ("sigmoid", "relu"):
                    steps.append({"op": node.op})
                else:
                    other = [i for i in node.inputs if i != prev]
                    if len(other) != 1:
                        # running value used twice (e.g. x * x): square it
                        steps.append({"op": node.op, "operand": "acc"})
                    else:
                        ext_inputs.append(other[0])
                        steps.append({"op": node.op,
                                      "operand": len(ext_inputs) - 1})
                prev = nid
            if any(s.get("operand") == "acc" for s in steps):
                continue
            tail = chain[-1]
            recipes = [{
                "kind": "node", "op": "fused_elementwise",
                "inputs": ext_inputs,
                "attrs": {"head": head_slot, "steps": steps},
                "name": current.nodes[tail].name + ".fused", "tag": "fused",
            }]
            # inject at the tail so every external operand already exists
            trial = _rebuild(current, set(chain), {tail: recipes},
                             {tail: "fused"})
            if _peak(trial, element_size) <= base_peak:
                current = trial
                base_peak = _peak(current, element_size)
                changed = True
                break
    return current
