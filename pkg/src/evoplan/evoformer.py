"""Single-device reference implementation of the evoformer block.

This is the ground-truth oracle that the sharded simulator and the chunked
executor are verified against.  All functions are pure and operate on plain
float64 ndarrays.

Conventions that the algorithms leave open (and that every other module in
this package inherits):
  * column attention over the sequence axis carries no pair-derived bias;
  * pair-stack attention reuses the gated row-attention structure with a
    per-key bias projected from the pair representation itself;
  * transitions use ReLU;
  * layernorm uses population variance with eps inside the square root.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import numpy as np

from .engine import layernorm_raw, relu_raw, sigmoid_raw, softmax_raw
from .errors import DimensionError


@dataclass(frozen=True)
class EvoConfig:
    """Dimensions of one evoformer block."""

    n_seq: int
    n_res: int
    h_msa: int = 16
    h_pair: int = 8
    n_head_msa: int = 2
    n_head_pair: int = 2
    hidden_proj: int = 4
    transition_factor: int = 4

    def __post_init__(self) -> None:
        for name in ("n_seq", "n_res", "h_msa", "h_pair", "n_head_msa",
                     "n_head_pair", "hidden_proj", "transition_factor"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be positive")
        if self.h_msa % self.n_head_msa:
            raise DimensionError("h_msa must be divisible by n_head_msa")
        if self.h_pair % self.n_head_pair:
            raise DimensionError("h_pair must be divisible by n_head_pair")

    @property
    def c_msa(self) -> int:
        return self.h_msa // self.n_head_msa

    @property
    def c_pair(self) -> int:
        return self.h_pair // self.n_head_pair


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _attention_param_shapes(prefix, h, c, n_head, bias_dim=None):
    shapes = {f"{prefix}/ln/g": (h,), f"{prefix}/ln/b": (h,)}
    for hh in range(n_head):
        for part in ("q", "k", "v", "g"):
            shapes[f"{prefix}/{part}/{hh}/w"] = (h, c)
            shapes[f"{prefix}/{part}/{hh}/b"] = (c,)
        if bias_dim is not None:
            shapes[f"{prefix}/bias/{hh}/w"] = (bias_dim,)
    shapes[f"{prefix}/o/w"] = (n_head * c, h)
    shapes[f"{prefix}/o/b"] = (h,)
    return shapes


def _transition_param_shapes(prefix, h, factor):
    return {
        f"{prefix}/ln/g": (h,), f"{prefix}/ln/b": (h,),
        f"{prefix}/w1": (h, factor * h), f"{prefix}/b1": (factor * h,),
        f"{prefix}/w2": (factor * h, h), f"{prefix}/b2": (h,),
    }


def _triangle_param_shapes(prefix, h, p):
    shapes = {f"{prefix}/ln/g": (h,), f"{prefix}/ln/b": (h,),
              f"{prefix}/g/w": (h, h), f"{prefix}/g/b": (h,)}
    for part in ("a_sig", "a_lin", "b_sig", "b_lin"):
        shapes[f"{prefix}/{part}/w"] = (h, p)
        shapes[f"{prefix}/{part}/b"] = (p,)
    shapes[f"{prefix}/ln2/g"] = (p,)
    shapes[f"{prefix}/ln2/b"] = (p,)
    shapes[f"{prefix}/o/w"] = (p, h)
    shapes[f"{prefix}/o/b"] = (h,)
    return shapes


def param_shapes(cfg: EvoConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of every weight in one block, keyed by sub-module name."""
    p = cfg.hidden_proj
    shapes: dict[str, tuple[int, ...]] = {}
    shapes.update(_attention_param_shapes(
        "msa_row", cfg.h_msa, cfg.c_msa, cfg.n_head_msa, bias_dim=cfg.h_pair))
    shapes["msa_row/ln_z/g"] = (cfg.h_pair,)
    shapes["msa_row/ln_z/b"] = (cfg.h_pair,)
    shapes.update(_attention_param_shapes(
        "msa_col", cfg.h_msa, cfg.c_msa, cfg.n_head_msa))
    shapes.update(_transition_param_shapes(
        "msa_trans", cfg.h_msa, cfg.transition_factor))
    shapes.update({
        "opm/ln/g": (cfg.h_msa,), "opm/ln/b": (cfg.h_msa,),
        "opm/a/w": (cfg.h_msa, p), "opm/a/b": (p,),
        "opm/b/w": (cfg.h_msa, p), "opm/b/b": (p,),
        "opm/o/w": (p * p, cfg.h_pair), "opm/o/b": (cfg.h_pair,),
    })
    shapes.update(_triangle_param_shapes("tri_out", cfg.h_pair, p))
    shapes.update(_triangle_param_shapes("tri_in", cfg.h_pair, p))
    shapes.update(_attention_param_shapes(
        "pair_row", cfg.h_pair, cfg.c_pair, cfg.n_head_pair, bias_dim=cfg.h_pair))
    shapes.update(_attention_param_shapes(
        "pair_col", cfg.h_pair, cfg.c_pair, cfg.n_head_pair, bias_dim=cfg.h_pair))
    shapes.update(_transition_param_shapes(
        "pair_trans", cfg.h_pair, cfg.transition_factor))
    return shapes


def init_block_params(cfg: EvoConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded pseudo-random parameter set; layout fixed by the config."""
    rng = np.random.default_rng(seed)
    params = {}
    for key, shape in param_shapes(cfg).items():
        leaf = key.rsplit("/", 1)[-1]
        if leaf == "g" and key.endswith(("ln/g", "ln2/g", "ln_z/g")):
            params[key] = np.ones(shape)
        elif leaf == "b" and key.endswith(("ln/b", "ln2/b", "ln_z/b")):
            params[key] = np.zeros(shape)
        elif leaf in ("b", "b1", "b2"):
            params[key] = rng.normal(0.0, 0.1, shape)
        else:
            fan_in = shape[0]
            params[key] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)
    return params


def params_to_json(params: dict[str, np.ndarray]) -> str:
    """Bit-stable flat dump keyed by sub-module name."""
    doc = {}
    for key in sorted(params):
        arr = np.ascontiguousarray(params[key], dtype=np.float64)
        doc[key] = {
            "shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        }
    return json.dumps({"schema": "evoplan-params-v1", "params": doc}, sort_keys=True)


def params_from_json(text: str) -> dict[str, np.ndarray]:
    doc = json.loads(text)
    params = {}
    for key, entry in doc["params"].items():
        raw = base64.b64decode(entry["data"])
        params[key] = np.frombuffer(raw, dtype=np.float64).reshape(entry["shape"]).copy()
    return params


# ---------------------------------------------------------------------------
# Attention core
# ---------------------------------------------------------------------------


def _attention_core(x, p, prefix, n_head, c, bias_fn=None, return_weights=False):
    """Gated multi-head attention over the middle axis of x [B, L, H].

    bias_fn(ln, head) may return an array broadcastable to the [B, L, L]
    logits; the bias is added before the 1/sqrt(c) scaling.
    """
    ln = layernorm_raw(x, p[f"{prefix}/ln/g"], p[f"{prefix}/ln/b"])
    inv_sqrt_c = 1.0 / math.sqrt(c)
    outs, weights = [], []
    for hh in range(n_head):
        q = ln @ p[f"{prefix}/q/{hh}/w"] + p[f"{prefix}/q/{hh}/b"]
        k = ln @ p[f"{prefix}/k/{hh}/w"] + p[f"{prefix}/k/{hh}/b"]
        v = ln @ p[f"{prefix}/v/{hh}/w"] + p[f"{prefix}/v/{hh}/b"]
        logits = q @ np.swapaxes(k, -1, -2)
        if bias_fn is not None:
            logits = logits + bias_fn(ln, hh)
        logits = logits * inv_sqrt_c
        a = softmax_raw(logits, -1)
        g = sigmoid_raw(x @ p[f"{prefix}/g/{hh}/w"] + p[f"{prefix}/g/{hh}/b"])
        outs.append(g * (a @ v))
        if return_weights:
            weights.append(a)
    out = np.concatenate(outs, axis=-1) @ p[f"{prefix}/o/w"] + p[f"{prefix}/o/b"]
    if return_weights:
        return out, weights
    return out


def msa_row_bias(z, p, cfg: EvoConfig) -> np.ndarray:
    """Pair-derived attention bias for MSA row attention, [N_r, N_r, n_head]."""
    ln_z = layernorm_raw(z, p["msa_row/ln_z/g"], p["msa_row/ln_z/b"])
    return np.stack(
        [ln_z @ p[f"msa_row/bias/{hh}/w"] for hh in range(cfg.n_head_msa)],
        axis=-1,
    )


def msa_row_attention_with_bias(m, bias, p, cfg: EvoConfig, return_weights=False):
    """Row attention given a precomputed bias stack [N_r, N_r, n_head]."""
    return _attention_core(
        m, p, "msa_row", cfg.n_head_msa, cfg.c_msa,
        bias_fn=lambda _ln, hh: bias[..., hh],
        return_weights=return_weights,
    )


def msa_row_attention(m, z, p, cfg: EvoConfig, return_weights=False):
    _check_msa(m, cfg)
    _check_pair(z, cfg)
    bias = msa_row_bias(z, p, cfg)
    return msa_row_attention_with_bias(m, bias, p, cfg, return_weights)


def msa_col_attention(m, p, cfg: EvoConfig, return_weights=False):
    _check_msa(m, cfg)
    mt = np.ascontiguousarray(np.transpose(m, (1, 0, 2)))
    res = _attention_core(mt, p, "msa_col", cfg.n_head_msa, cfg.c_msa,
                          return_weights=return_weights)
    if return_weights:
        out, w = res
        return np.transpose(out, (1, 0, 2)), w
    return np.transpose(res, (1, 0, 2))


def transition(x, p, prefix: str):
    ln = layernorm_raw(x, p[f"{prefix}/ln/g"], p[f"{prefix}/ln/b"])
    hidden = relu_raw(ln @ p[f"{prefix}/w1"] + p[f"{prefix}/b1"])
    return hidden @ p[f"{prefix}/w2"] + p[f"{prefix}/b2"]


def outer_product_mean(m, p, cfg: EvoConfig):
    _check_msa(m, cfg)
    ln = layernorm_raw(m, p["opm/ln/g"], p["opm/ln/b"])
    a = ln @ p["opm/a/w"] + p["opm/a/b"]
    b = ln @ p["opm/b/w"] + p["opm/b/b"]
    return outer_product_mean_from_projections(a, b, p, cfg)


def outer_product_mean_from_projections(a, b, p, cfg: EvoConfig):
    """mean-over-sequences outer product of left/right projections."""
    o = np.einsum("sip,sjq->ijpq", a, b) / a.shape[0]
    flat = o.reshape(o.shape[0], o.shape[1], -1)
    return flat @ p["opm/o/w"] + p["opm/o/b"]


def _triangle_projections(z, p, prefix):
    ln = layernorm_raw(z, p[f"{prefix}/ln/g"], p[f"{prefix}/ln/b"])
    g = sigmoid_raw(ln @ p[f"{prefix}/g/w"] + p[f"{prefix}/g/b"])
    a = sigmoid_raw(ln @ p[f"{prefix}/a_sig/w"] + p[f"{prefix}/a_sig/b"]) \
        * (ln @ p[f"{prefix}/a_lin/w"] + p[f"{prefix}/a_lin/b"])
    b = sigmoid_raw(ln @ p[f"{prefix}/b_sig/w"] + p[f"{prefix}/b_sig/b"]) \
        * (ln @ p[f"{prefix}/b_lin/w"] + p[f"{prefix}/b_lin/b"])
    return g, a, b


def _triangle_finish(g, t, p, prefix):
    ln2 = layernorm_raw(t, p[f"{prefix}/ln2/g"], p[f"{prefix}/ln2/b"])
    return g * (ln2 @ p[f"{prefix}/o/w"] + p[f"{prefix}/o/b"])


def tri_update_outgoing(z, p, cfg: EvoConfig):
    _check_pair(z, cfg)
    g, a, b = _triangle_projections(z, p, "tri_out")
    t = np.einsum("ikh,jkh->ijh", a, b)
    return _triangle_finish(g, t, p, "tri_out")


def tri_update_incoming(z, p, cfg: EvoConfig):
    _check_pair(z, cfg)
    g, a, b = _triangle_projections(z, p, "tri_in")
    t = np.einsum("kih,kjh->ijh", a, b)
    return _triangle_finish(g, t, p, "tri_in")


def _pair_bias_fn(p, prefix):
    # Per-key bias projected from the normalized pair rows themselves;
    # broadcastable [B, 1, L] against the [B, L, L] logits.
    def fn(ln, hh):
        return (ln @ p[f"{prefix}/bias/{hh}/w"])[:, None, :]
    return fn


def pair_attention_row(z, p, cfg: EvoConfig, return_weights=False):
    _check_pair(z, cfg)
    return _attention_core(
        z, p, "pair_row", cfg.n_head_pair, cfg.c_pair,
        bias_fn=_pair_bias_fn(p, "pair_row"), return_weights=return_weights)


def pair_attention_col(z, p, cfg: EvoConfig, return_weights=False):
    _check_pair(z, cfg)
    zt = np.ascontiguousarray(np.transpose(z, (1, 0, 2)))
    res = _attention_core(
        zt, p, "pair_col", cfg.n_head_pair, cfg.c_pair,
        bias_fn=_pair_bias_fn(p, "pair_col"), return_weights=return_weights)
    if return_weights:
        out, w = res
        return np.transpose(out, (1, 0, 2)), w
    return np.transpose(res, (1, 0, 2))


def evoformer_block(m, z, p, cfg: EvoConfig):
    """One full block; every sub-module is applied with a residual addition."""
    m = m + msa_row_attention(m, z, p, cfg)
    m = m + msa_col_attention(m, p, cfg)
    m = m + transition(m, p, "msa_trans")
    z = z + outer_product_mean(m, p, cfg)
    z = z + tri_update_outgoing(z, p, cfg)
    z = z + tri_update_incoming(z, p, cfg)
    z = z + pair_attention_row(z, p, cfg)
    z = z + pair_attention_col(z, p, cfg)
    z = z + transition(z, p, "pair_trans")
    return m, z


def _check_msa(m, cfg: EvoConfig) -> None:
    if m.shape != (cfg.n_seq, cfg.n_res, cfg.h_msa):
        raise DimensionError(
            f"MSA tensor shape {m.shape} does not match config "
            f"({cfg.n_seq}, {cfg.n_res}, {cfg.h_msa})")


def _check_pair(z, cfg: EvoConfig) -> None:
    if z.shape != (cfg.n_res, cfg.n_res, cfg.h_pair):
        raise DimensionError(
            f"pair tensor shape {z.shape} does not match config "
            f"({cfg.n_res}, {cfg.n_res}, {cfg.h_pair})")
