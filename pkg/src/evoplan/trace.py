"""Builds the fine-grained computation graph for one evoformer block.

The traced graph mirrors the reference implementation operation by
operation (attention logits, bias adds, gates and residuals are all
separate nodes), so executing it reproduces
:func:`evoplan.evoformer.evoformer_block` to within 1e-12.
"""

from __future__ import annotations

import math

import numpy as np

from .evoformer import EvoConfig
from .graph import Graph, GraphBuilder


class _Tracer:
    def __init__(self, cfg: EvoConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.p = params
        self.b = GraphBuilder()
        self._const_ids: dict[str, int] = {}

    def const(self, key: str, reshape=None) -> int:
        cache_key = key if reshape is None else f"{key}#r"
        if cache_key not in self._const_ids:
            value = self.p[key]
            if reshape is not None:
                value = value.reshape(reshape)
            self._const_ids[cache_key] = self.b.const(value, name=key)
        return self._const_ids[cache_key]

    def scalar(self, value: float, name: str) -> int:
        return self.b.const(np.array([value]), name=name)

    def linear(self, x: int, wkey: str, bkey: str | None, name: str,
               contract_dims: int = 1) -> int:
        attrs = {} if contract_dims == 1 else {"contract_dims": contract_dims}
        y = self.b.add_node("linear", [x, self.const(wkey)], attrs, name=name)
        if bkey is not None:
            y = self.b.add_node("add", [y, self.const(bkey)], name=f"{name}.bias")
        return y

    def layernorm(self, x: int, prefix: str, suffix: str = "ln") -> int:
        return self.b.add_node(
            "layernorm",
            [x, self.const(f"{prefix}/{suffix}/g"), self.const(f"{prefix}/{suffix}/b")],
            name=f"{prefix}.{suffix}")

    # -- sub-modules --------------------------------------------------------

    def attention(self, x: int, prefix: str, n_head: int, c: int,
                  bias_heads=None) -> int:
        """Gated attention over the middle axis of x [B, L, H].

        bias_heads, when given, maps a head index to a node id broadcastable
        against the [B, L, L] logits.
        """
        ln = self.layernorm(x, prefix)
        scale = self.scalar(1.0 / math.sqrt(c), name=f"{prefix}.scale")
        head_outs = []
        for hh in range(n_head):
            q = self.linear(ln, f"{prefix}/q/{hh}/w", f"{prefix}/q/{hh}/b",
                            f"{prefix}.q{hh}")
            k = self.linear(ln, f"{prefix}/k/{hh}/w", f"{prefix}/k/{hh}/b",
                            f"{prefix}.k{hh}")
            v = self.linear(ln, f"{prefix}/v/{hh}/w", f"{prefix}/v/{hh}/b",
                            f"{prefix}.v{hh}")
            kt = self.b.add_node("permute", [k], {"perm": [0, 2, 1]},
                                 name=f"{prefix}.kT{hh}")
            logits = self.b.add_node("matmul", [q, kt], name=f"{prefix}.logits{hh}")
            if bias_heads is not None:
                logits = self.b.add_node("add", [logits, bias_heads(hh)],
                                         name=f"{prefix}.logits{hh}.bias")
            logits = self.b.add_node("mul", [logits, scale],
                                     name=f"{prefix}.logits{hh}.scale")
            attn = self.b.add_node("softmax", [logits], {"axis": 2},
                                   name=f"{prefix}.attn{hh}")
            o = self.b.add_node("matmul", [attn, v], name=f"{prefix}.ctx{hh}")
            g = self.linear(x, f"{prefix}/g/{hh}/w", f"{prefix}/g/{hh}/b",
                            f"{prefix}.gate{hh}")
            g = self.b.add_node("sigmoid", [g], name=f"{prefix}.gate{hh}.sig")
            head_outs.append(self.b.add_node("mul", [g, o],
                                             name=f"{prefix}.gated{hh}"))
        cat = (head_outs[0] if len(head_outs) == 1 else
               self.b.add_node("concat", head_outs, name=f"{prefix}.concat"))
        return self.linear(cat, f"{prefix}/o/w", f"{prefix}/o/b", f"{prefix}.out")

    def msa_row_attention(self, m: int, z: int) -> int:
        ln_z = self.layernorm(z, "msa_row", "ln_z")
        biases = {
            hh: self.linear(ln_z, f"msa_row/bias/{hh}/w", None, f"msa_row.bias{hh}")
            for hh in range(self.cfg.n_head_msa)
        }
        return self.attention(m, "msa_row", self.cfg.n_head_msa, self.cfg.c_msa,
                              bias_heads=lambda hh: biases[hh])

    def msa_col_attention(self, m: int) -> int:
        mt = self.b.add_node("permute", [m], {"perm": [1, 0, 2]}, name="msa_col.T")
        out = self.attention(mt, "msa_col", self.cfg.n_head_msa, self.cfg.c_msa)
        return self.b.add_node("permute", [out], {"perm": [1, 0, 2]},
                               name="msa_col.Tback")

    def transition(self, x: int, prefix: str) -> int:
        ln = self.layernorm(x, prefix)
        h = self.linear(ln, f"{prefix}/w1", f"{prefix}/b1", f"{prefix}.in")
        h = self.b.add_node("relu", [h], name=f"{prefix}.relu")
        return self.linear(h, f"{prefix}/w2", f"{prefix}/b2", f"{prefix}.out")

    def outer_product_mean(self, m: int) -> int:
        ln = self.layernorm(m, "opm")
        a = self.linear(ln, "opm/a/w", "opm/a/b", "opm.left")
        bp = self.linear(ln, "opm/b/w", "opm/b/b", "opm.right")
        outer = self.b.add_node("outer", [a, bp], name="opm.outer")
        mean = self.b.add_node("mean", [outer], {"axis": 0}, name="opm.mean")
        return self.linear(mean, "opm/o/w", "opm/o/b", "opm.out", contract_dims=2)

    def triangle_update(self, z: int, prefix: str, mode: str) -> int:
        ln = self.layernorm(z, prefix)
        g = self.linear(ln, f"{prefix}/g/w", f"{prefix}/g/b", f"{prefix}.gate")
        g = self.b.add_node("sigmoid", [g], name=f"{prefix}.gate.sig")
        projections = {}
        for part in ("a", "b"):
            sig = self.linear(ln, f"{prefix}/{part}_sig/w", f"{prefix}/{part}_sig/b",
                              f"{prefix}.{part}sig")
            sig = self.b.add_node("sigmoid", [sig], name=f"{prefix}.{part}sig.sig")
            lin = self.linear(ln, f"{prefix}/{part}_lin/w", f"{prefix}/{part}_lin/b",
                              f"{prefix}.{part}lin")
            projections[part] = self.b.add_node(
                "mul", [sig, lin], name=f"{prefix}.{part}")
        t = self.b.add_node("contract", [projections["a"], projections["b"]],
                            {"mode": mode}, name=f"{prefix}.contract")
        ln2 = self.layernorm(t, prefix, "ln2")
        u = self.linear(ln2, f"{prefix}/o/w", f"{prefix}/o/b", f"{prefix}.out")
        return self.b.add_node("mul", [g, u], name=f"{prefix}.gated")

    def pair_attention(self, z: int, prefix: str, transposed: bool) -> int:
        x = z
        if transposed:
            x = self.b.add_node("permute", [z], {"perm": [1, 0, 2]},
                                name=f"{prefix}.T")
        # Per-key bias projected from the attention input's own layernorm
        # output; it is recomputed here because the bias flows from a
        # different const (weight reshaped to a column).
        ln = self.layernorm(x, prefix)
        bias_ids = {}
        for hh in range(self.cfg.n_head_pair):
            wkey = f"{prefix}/bias/{hh}/w"
            col = self.b.add_node(
                "linear", [ln, self.const(wkey, reshape=(-1, 1))],
                name=f"{prefix}.bias{hh}")
            bias_ids[hh] = self.b.add_node(
                "permute", [col], {"perm": [0, 2, 1]}, name=f"{prefix}.bias{hh}.T")
        out = self.attention(x, prefix, self.cfg.n_head_pair, self.cfg.c_pair,
                             bias_heads=lambda hh: bias_ids[hh])
        if transposed:
            out = self.b.add_node("permute", [out], {"perm": [1, 0, 2]},
                                  name=f"{prefix}.Tback")
        return out

    def residual(self, x: int, update: int, name: str) -> int:
        return self.b.add_node("add", [x, update], name=name)

    def trace(self) -> Graph:
        cfg = self.cfg
        m = self.b.input((cfg.n_seq, cfg.n_res, cfg.h_msa), name="m")
        z = self.b.input((cfg.n_res, cfg.n_res, cfg.h_pair), name="z")
        m = self.residual(m, self.msa_row_attention(m, z), "res.msa_row")
        m = self.residual(m, self.msa_col_attention(m), "res.msa_col")
        m = self.residual(m, self.transition(m, "msa_trans"), "res.msa_trans")
        z = self.residual(z, self.outer_product_mean(m), "res.opm")
        z = self.residual(z, self.triangle_update(z, "tri_out", "outgoing"),
                          "res.tri_out")
        z = self.residual(z, self.triangle_update(z, "tri_in", "incoming"),
                          "res.tri_in")
        z = self.residual(z, self.pair_attention(z, "pair_row", False),
                          "res.pair_row")
        z = self.residual(z, self.pair_attention(z, "pair_col", True),
                          "res.pair_col")
        z = self.residual(z, self.transition(z, "pair_trans"), "res.pair_trans")
        return self.b.build([m, z])


def trace_evoformer(cfg: EvoConfig, params: dict[str, np.ndarray]) -> Graph:
    """Trace one evoformer block into a fine-grained graph.

    Runtime inputs are the MSA and pair tensors; all parameters are bound
    as constant input nodes.
    """
    return _Tracer(cfg, params).trace()
