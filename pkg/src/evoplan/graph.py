"""Fine-grained computation-graph IR with dimension-flow annotations.

Nodes are stored in execution (topological) order and ``node.id`` equals the
node's position.  Each op kind carries an exact dimension-flow relation:
for every output dimension, either the list of input dimensions it flows
from, or the COMPUTE marker when the dimension participates in a reduction
or normalization and therefore can never be chunked.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import DimensionError, GraphFormatError

COMPUTE = "compute"

ELEMENTWISE_OPS = frozenset({"add", "mul", "sigmoid", "relu"})

OP_KINDS = frozenset({
    "input", "linear", "layernorm", "softmax", "fused_softmax", "sigmoid",
    "relu", "add", "mul", "mean", "permute", "concat", "slice", "outer",
    "contract", "matmul", "fused_elementwise",
})


@dataclass
class Node:
    id: int
    op: str
    inputs: list[int]
    attrs: dict
    shape: tuple[int, ...]
    name: str = ""

    @property
    def nbytes_per_element(self) -> int:
        return engine.EXECUTION_ELEMENT_SIZE


def shape_bytes(shape, element_size: int) -> int:
    return int(np.prod(shape, dtype=np.int64)) * element_size


# ---------------------------------------------------------------------------
# Shape inference
# ---------------------------------------------------------------------------


def infer_shape(op: str, in_shapes: list[tuple[int, ...]], attrs: dict) -> tuple[int, ...]:
    if op == "input":
        return tuple(attrs["shape"])
    if op == "linear":
        x, w = in_shapes
        c = attrs.get("contract_dims", 1)
        if len(x) < c:
            raise DimensionError(f"linear input rank {len(x)} < contract_dims {c}")
        k = math.prod(x[-c:])
        if len(w) == 1:
            if w[0] != k:
                raise DimensionError(f"linear weight {w} mismatch with input {x}")
            return x[:-c]
        if w[0] != k:
            raise DimensionError(f"linear weight {w} mismatch with input {x}")
        return x[:-c] + (w[1],)
    if op in ("add", "mul"):
        try:
            return tuple(np.broadcast_shapes(*in_shapes))
        except ValueError as exc:
            raise DimensionError(f"{op} shapes incompatible: {in_shapes}") from exc
    if op in ("sigmoid", "relu"):
        return in_shapes[0]
    if op == "layernorm":
        x, g, b = in_shapes
        if g != (x[-1],) or b != (x[-1],):
            raise DimensionError(f"layernorm params {g}/{b} mismatch input {x}")
        return x
    if op in ("softmax", "fused_softmax"):
        axis = attrs["axis"]
        if not (0 <= axis < len(in_shapes[0])):
            raise DimensionError(f"softmax axis {axis} out of range")
        return in_shapes[0]
    if op == "mean":
        axis = attrs["axis"]
        x = in_shapes[0]
        if not (0 <= axis < len(x)):
            raise DimensionError(f"mean axis {axis} out of range")
        return x[:axis] + x[axis + 1:]
    if op == "permute":
        perm = attrs["perm"]
        x = in_shapes[0]
        if sorted(perm) != list(range(len(x))):
            raise DimensionError(f"permutation {perm} invalid for rank {len(x)}")
        return tuple(x[p] for p in perm)
    if op == "concat":
        lead = in_shapes[0][:-1]
        for s in in_shapes[1:]:
            if s[:-1] != lead:
                raise DimensionError(f"concat leading dims differ: {in_shapes}")
        return lead + (sum(s[-1] for s in in_shapes),)
    if op == "slice":
        axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
        x = in_shapes[0]
        if not (0 <= axis < len(x) and 0 <= start < stop <= x[axis]):
            raise DimensionError(f"slice attrs {attrs} invalid for {x}")
        return x[:axis] + (stop - start,) + x[axis + 1:]
    if op == "matmul":
        a, b = in_shapes
        if len(a) != len(b) or a[:-2] != b[:-2] or a[-1] != b[-2]:
            raise DimensionError(f"matmul shapes incompatible: {a} x {b}")
        return a[:-1] + (b[-1],)
    if op == "outer":
        a, b = in_shapes
        if len(a) != 3 or len(b) != 3 or a[0] != b[0]:
            raise DimensionError(f"outer shapes incompatible: {a} x {b}")
        return (a[0], a[1], b[1], a[2], b[2])
    if op == "contract":
        a, b = in_shapes
        mode = attrs["mode"]
        if len(a) != 3 or len(b) != 3 or a[2] != b[2]:
            raise DimensionError(f"contract shapes incompatible: {a} x {b}")
        if mode == "outgoing":
            if a[1] != b[1]:
                raise DimensionError(f"contract-k extents differ: {a} x {b}")
            return (a[0], b[0], a[2])
        if mode == "incoming":
            if a[0] != b[0]:
                raise DimensionError(f"contract-k extents differ: {a} x {b}")
            return (a[1], b[1], a[2])
        raise DimensionError(f"unknown contract mode {mode!r}")
    if op == "fused_elementwise":
        try:
            return tuple(np.broadcast_shapes(*in_shapes))
        except ValueError as exc:
            raise DimensionError(f"fused shapes incompatible: {in_shapes}") from exc
    raise DimensionError(f"unknown op kind {op!r}")


# ---------------------------------------------------------------------------
# Dimension flow
# ---------------------------------------------------------------------------


class DimFlow:
    """Exact flow relation between output and input dimensions of one node.

    ``out[d]`` is COMPUTE or a list of (input index, input dim) sources.
    ``in_dest(i, d)`` gives the output dim an input dim flows to, or COMPUTE
    when slicing that input dim would change the op's result shape-wise
    (reduced, normalized, or concatenated dims).
    """

    def __init__(self, out: list, n_inputs: int):
        self.out = out
        self._dest: dict[tuple[int, int], int] = {}
        for d, entry in enumerate(out):
            if entry == COMPUTE:
                continue
            for (i, di) in entry:
                self._dest[(i, di)] = d
        self.n_inputs = n_inputs

    def chunkable(self, out_dim: int) -> bool:
        return self.out[out_dim] != COMPUTE

    def sources(self, out_dim: int) -> list[tuple[int, int]]:
        entry = self.out[out_dim]
        return [] if entry == COMPUTE else list(entry)

    def in_dest(self, in_idx: int, in_dim: int):
        return self._dest.get((in_idx, in_dim), COMPUTE)


def _broadcast_flow(out_shape, in_shapes):
    out = []
    rank = len(out_shape)
    for d in range(rank):
        srcs = []
        for i, s in enumerate(in_shapes):
            di = d - (rank - len(s))
            if di >= 0 and s[di] == out_shape[d]:
                srcs.append((i, di))
        out.append(srcs)
    return out


def node_dim_flow(node: Node, in_shapes: list[tuple[int, ...]]) -> DimFlow:
    op, shape = node.op, node.shape
    rank = len(shape)
    if op == "input":
        out = [[] for _ in range(rank)]
    elif op == "linear":
        c = node.attrs.get("contract_dims", 1)
        x = in_shapes[0]
        lead = len(x) - c
        out = [[(0, d)] for d in range(lead)]
        if len(in_shapes[1]) == 2:
            if c == 1:
                out.append([(1, 1)])
            else:
                # Flattened multi-dim contraction: the channel dim of a
                # reshaped weight is not sliceable through the flat layout.
                out.append(COMPUTE)
    elif op in ("add", "mul", "fused_elementwise"):
        out = _broadcast_flow(shape, in_shapes)
    elif op in ("sigmoid", "relu"):
        out = [[(0, d)] for d in range(rank)]
    elif op == "layernorm":
        out = [[(0, d)] for d in range(rank - 1)] + [COMPUTE]
    elif op in ("softmax", "fused_softmax"):
        axis = node.attrs["axis"]
        out = [COMPUTE if d == axis else [(0, d)] for d in range(rank)]
    elif op == "mean":
        axis = node.attrs["axis"]
        out = [[(0, d if d < axis else d + 1)] for d in range(rank)]
    elif op == "permute":
        perm = node.attrs["perm"]
        out = [[(0, perm[d])] for d in range(rank)]
    elif op == "concat":
        out = [[(i, d) for i in range(len(in_shapes))] for d in range(rank - 1)]
        out.append(COMPUTE)
    elif op == "slice":
        axis = node.attrs["axis"]
        out = [COMPUTE if d == axis else [(0, d)] for d in range(rank)]
    elif op == "matmul":
        out = [[(0, d), (1, d)] for d in range(rank - 2)]
        out.append([(0, rank - 2)])
        out.append([(1, rank - 1)])
    elif op == "outer":
        out = [[(0, 0), (1, 0)], [(0, 1)], [(1, 1)], [(0, 2)], [(1, 2)]]
    elif op == "contract":
        if node.attrs["mode"] == "outgoing":
            out = [[(0, 0)], [(1, 0)], [(0, 2), (1, 2)]]
        else:
            out = [[(0, 1)], [(1, 1)], [(0, 2), (1, 2)]]
    else:
        raise DimensionError(f"unknown op kind {op!r}")
    return DimFlow(out, len(in_shapes))


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    nodes: list[Node]
    runtime_inputs: list[int]
    consts: dict[int, np.ndarray]
    outputs: list[int]
    consumers: dict[int, list[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.consumers = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                self.consumers[i].append(n.id)

    @property
    def graph_inputs(self) -> list[int]:
        return self.runtime_inputs + sorted(self.consts)

    def in_shapes(self, node: Node) -> list[tuple[int, ...]]:
        return [self.nodes[i].shape for i in node.inputs]

    def dim_flow(self, node: Node) -> DimFlow:
        return node_dim_flow(node, self.in_shapes(node))

    def last_consumer(self) -> dict[int, int]:
        """node id -> id of the last node that reads it (absent if unused)."""
        return {i: cons[-1] for i, cons in self.consumers.items() if cons}

    def validate(self) -> None:
        for pos, n in enumerate(self.nodes):
            if n.id != pos:
                raise GraphFormatError(f"node id {n.id} out of order at {pos}")
            for i in n.inputs:
                if i >= n.id:
                    raise GraphFormatError(
                        f"node {n.id} has forward reference to {i}")
            if n.op not in OP_KINDS:
                raise GraphFormatError(f"node {n.id}: unknown op {n.op!r}")
            if n.op != "input":
                expected = infer_shape(n.op, self.in_shapes(n), n.attrs)
                if tuple(expected) != tuple(n.shape):
                    raise GraphFormatError(
                        f"node {n.id} ({n.op}): shape {n.shape} != inferred "
                        f"{expected}")
        for i in self.outputs:
            if not (0 <= i < len(self.nodes)):
                raise GraphFormatError(f"output id {i} out of range")


class GraphBuilder:
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.runtime_inputs: list[int] = []
        self.consts: dict[int, np.ndarray] = {}

    def _append(self, op, inputs, attrs, shape, name) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, op, list(inputs), dict(attrs), tuple(shape), name))
        return nid

    def input(self, shape, name: str = "") -> int:
        nid = self._append("input", [], {"shape": list(shape)}, shape, name)
        self.runtime_inputs.append(nid)
        return nid

    def const(self, value, name: str = "") -> int:
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        nid = self._append("input", [], {"shape": list(arr.shape)}, arr.shape, name)
        self.consts[nid] = arr
        return nid

    def add_node(self, op, inputs, attrs=None, name: str = "") -> int:
        attrs = attrs or {}
        in_shapes = [self.nodes[i].shape for i in inputs]
        shape = infer_shape(op, in_shapes, attrs)
        return self._append(op, inputs, attrs, shape, name)

    def build(self, outputs: list[int]) -> Graph:
        g = Graph(self.nodes, self.runtime_inputs, self.consts, list(outputs))
        g.validate()
        return g


# ---------------------------------------------------------------------------
# Node kernels and execution
# ---------------------------------------------------------------------------


def apply_node(node: Node, args: list[np.ndarray]) -> np.ndarray:
    op = node.op
    if op == "linear":
        x, w = args
        c = node.attrs.get("contract_dims", 1)
        lead = x.shape[: x.ndim - c]
        xf = x.reshape(lead + (-1,))
        return np.ascontiguousarray(xf @ w)
    if op == "add":
        return args[0] + args[1]
    if op == "mul":
        return args[0] * args[1]
    if op == "sigmoid":
        return engine.sigmoid_raw(args[0])
    if op == "relu":
        return engine.relu_raw(args[0])
    if op == "layernorm":
        return engine.layernorm_raw(args[0], args[1], args[2],
                                    node.attrs.get("eps", 1e-5))
    if op == "softmax":
        return engine.softmax_raw(args[0], node.attrs["axis"])
    if op == "fused_softmax":
        return engine.fused_softmax_mask_bias_raw(
            args[0], args[1], args[2], node.attrs["axis"])
    if op == "mean":
        return np.mean(args[0], axis=node.attrs["axis"])
    if op == "permute":
        return np.ascontiguousarray(np.transpose(args[0], node.attrs["perm"]))
    if op == "concat":
        return np.concatenate(args, axis=-1)
    if op == "slice":
        a = node.attrs
        idx = [slice(None)] * args[0].ndim
        idx[a["axis"]] = slice(a["start"], a["stop"])
        return np.ascontiguousarray(args[0][tuple(idx)])
    if op == "matmul":
        return np.matmul(args[0], args[1])
    if op == "outer":
        a, b = args
        return np.einsum("sip,sjq->sijpq", a, b)
    if op == "contract":
        a, b = args
        if node.attrs["mode"] == "outgoing":
            return np.einsum("ikh,jkh->ijh", a, b)
        return np.einsum("kih,kjh->ijh", a, b)
    if op == "fused_elementwise":
        return apply_fused_elementwise(node, args)
    raise DimensionError(f"cannot execute op kind {node.op!r}")


def apply_fused_elementwise(node: Node, args: list[np.ndarray]) -> np.ndarray:
    """Run a collapsed elementwise chain without tracked intermediates.

    attrs["steps"] is a list of {"op", "operand"} entries; "operand" is the
    input slot of the second operand for binary steps (the first operand is
    always the running value), and attrs["head"] names the input slot the
    chain starts from.
    """
    acc = args[node.attrs["head"]]
    for step in node.attrs["steps"]:
        op = step["op"]
        if op == "sigmoid":
            acc = engine.sigmoid_raw(acc)
        elif op == "relu":
            acc = engine.relu_raw(acc)
        elif op == "add":
            other = args[step["operand"]]
            acc = acc + other if step.get("swap") is not True else other + acc
        elif op == "mul":
            other = args[step["operand"]]
            acc = acc * other
        else:
            raise DimensionError(f"bad fused step op {op!r}")
    return np.broadcast_to(acc, node.shape).copy() if acc.shape != node.shape else acc


def execute(graph: Graph, inputs: dict[int, np.ndarray],
            allocator: engine.Allocator | None = None) -> dict[int, np.ndarray]:
    """Run the graph in node order; returns {output id: array}.

    With an allocator, every node's buffer is tracked and freed right after
    its last consumer runs (graph outputs are kept).  The allocator's peak
    then equals the estimator's predicted peak exactly.
    """
    missing = [i for i in graph.runtime_inputs if i not in inputs]
    if missing:
        raise DimensionError(f"missing runtime inputs: {missing}")
    last = graph.last_consumer()
    outputs = set(graph.outputs)
    if allocator is None:
        values: dict[int, np.ndarray] = {}
        for node in graph.nodes:
            if node.op == "input":
                values[node.id] = graph.consts.get(node.id, inputs.get(node.id))
            else:
                values[node.id] = apply_node(
                    node, [values[i] for i in node.inputs])
        return {i: values[i] for i in graph.outputs}

    with engine.use_allocator(allocator):
        tensors: dict[int, engine.Tensor] = {}
        for node in graph.nodes:
            if node.op == "input":
                src = graph.consts.get(node.id, inputs.get(node.id))
                tensors[node.id] = engine.Tensor(src)
            else:
                raw = apply_node(node, [tensors[i].data for i in node.inputs])
                tensors[node.id] = engine.Tensor(raw)
            # The moment right after this node runs is its footprint; inputs
            # whose last consumer is this node are released afterwards.
            for i in node.inputs:
                if last.get(i) == node.id and i not in outputs:
                    tensors[i].free()
        return {i: tensors[i].data for i in graph.outputs}


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

GRAPH_SCHEMA = "evoplan-graph-v1"


def graph_to_json(graph: Graph, include_consts: bool = True) -> str:
    nodes = []
    for n in graph.nodes:
        flow = graph.dim_flow(n) if n.op != "input" else None
        nodes.append({
            "id": n.id,
            "op": n.op,
            "inputs": n.inputs,
            "attrs": n.attrs,
            "shape": list(n.shape),
            "name": n.name,
            "dim_flow": None if flow is None else [
                entry if entry == COMPUTE else [list(s) for s in entry]
                for entry in flow.out
            ],
        })
    doc = {
        "schema": GRAPH_SCHEMA,
        "nodes": nodes,
        "inputs": graph.graph_inputs,
        "runtime_inputs": graph.runtime_inputs,
        "outputs": graph.outputs,
    }
    if include_consts:
        doc["consts"] = {
            str(i): {
                "shape": list(v.shape),
                "data": base64.b64encode(v.tobytes()).decode("ascii"),
            }
            for i, v in graph.consts.items()
        }
    return json.dumps(doc, sort_keys=True)


def graph_from_json(text: str) -> Graph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(
            f"malformed graph JSON at line {exc.lineno} column {exc.colno}: "
            f"{exc.msg}") from exc
    if doc.get("schema") != GRAPH_SCHEMA:
        raise GraphFormatError(f"unexpected schema {doc.get('schema')!r}")
    nodes = [
        Node(e["id"], e["op"], list(e["inputs"]), dict(e["attrs"]),
             tuple(e["shape"]), e.get("name", ""))
        for e in doc["nodes"]
    ]
    consts = {
        int(i): np.frombuffer(
            base64.b64decode(e["data"]), dtype=np.float64
        ).reshape(e["shape"]).copy()
        for i, e in doc.get("consts", {}).items()
    }
    graph = Graph(nodes, list(doc["runtime_inputs"]), consts, list(doc["outputs"]))
    graph.validate()
    return graph
