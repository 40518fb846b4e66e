"""Closed-form communication volume model: tensor-style sharding vs axial
sharding of the evoformer block, plus activation-memory accounting.

Volumes are per-device sends in units of K, the byte size of the sharded
activation tensor, for one block (forward plus backward):

  tensor parallel   24 * K * (N - 1) / N          (12 ring all-reduces)
  axial parallel     3 * K * (N - 1) / N          (one gathered outer-product
                                                   factor, two gathered
                                                   triangle factors)
                   + 12 * K * (N - 1) / N**2      (6 axis switches each way)

Tensor-style sharding splits attention heads, so it cannot use more devices
than there are heads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import DomainError, HeadLimitError
from .evoformer import EvoConfig


@dataclass(frozen=True)
class VolumeReport:
    k: float
    n_devices: int
    tp_volume: float
    dap_volume: float
    dap_breakdown: dict[str, float] = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.tp_volume / self.dap_volume if self.dap_volume else float("inf")

    def to_json(self) -> str:
        return json.dumps({
            "schema": "evoplan-commvolume-v1",
            "k": self.k,
            "n_devices": self.n_devices,
            "tp_volume": self.tp_volume,
            "dap_volume": self.dap_volume,
            "dap_breakdown": self.dap_breakdown,
            "ratio": self.ratio,
        }, sort_keys=True)


@dataclass(frozen=True)
class CommModel:
    """Per-device communication volume for one evoformer block.

    k is the byte size of the sharded activation; gather_k overrides let the
    gathered factors use their own sizes when predicting a simulated ledger
    (they are projections, usually much smaller than k).
    """

    n_heads: int = 4
    all_reduces_per_block: int = 12
    axis_switches_per_block: int = 6
    gather_k: dict[str, float] | None = None

    def _check(self, k: float, n: int) -> None:
        if k < 0:
            raise DomainError(f"volume parameter k must be non-negative, got {k}")
        if n < 1:
            raise DomainError(f"device count must be positive, got {n}")

    def tp_volume(self, k: float, n: int) -> float:
        """Head-sharded attention: one ring all-reduce per projection, both
        passes."""
        self._check(k, n)
        if n > self.n_heads:
            raise HeadLimitError(n, self.n_heads)
        return self.all_reduces_per_block * 2.0 * k * (n - 1) / n

    def dap_breakdown(self, k: float, n: int) -> dict[str, float]:
        self._check(k, n)
        gk = self.gather_k or {}
        opm_k = gk.get("opm", k)
        tri_k = gk.get("triangle", k)
        return {
            "opm_gather": opm_k * (n - 1) / n,
            "triangle_gather": 2.0 * tri_k * (n - 1) / n,
            "axis_switch": 2.0 * self.axis_switches_per_block
                           * k * (n - 1) / n ** 2,
        }

    def dap_volume(self, k: float, n: int) -> float:
        return sum(self.dap_breakdown(k, n).values())

    def forward_breakdown(self, k: float, n: int) -> dict[str, float]:
        """Forward-pass-only per-device volumes (half the axis switches,
        all three gathers); comparable to a simulated single-block ledger."""
        self._check(k, n)
        gk = self.gather_k or {}
        opm_k = gk.get("opm", k)
        tri_k = gk.get("triangle", k)
        msa_k = gk.get("msa", k)   # two of the six switches carry the MSA
        return {
            "all_to_all": (2.0 * msa_k + 4.0 * k) * (n - 1) / n ** 2,
            "all_gather": (opm_k + 2.0 * tri_k) * (n - 1) / n,
        }

    def forward_volume(self, k: float, n: int) -> float:
        return sum(self.forward_breakdown(k, n).values())

    def compare(self, k: float, n: int) -> VolumeReport:
        return VolumeReport(
            k=k, n_devices=n,
            tp_volume=self.tp_volume(k, n),
            dap_volume=self.dap_volume(k, n),
            dap_breakdown=self.dap_breakdown(k, n),
        )


def activation_memory(n_res: int, n_head: int, n_layers: int,
                      element_size: int = 2) -> int:
    """Attention-map activation bytes: n_res**3 * n_head per layer."""
    if min(n_res, n_head, n_layers, element_size) < 1:
        raise DomainError("activation_memory arguments must be positive")
    return n_res ** 3 * n_head * element_size * n_layers


def predict_block_ledger(cfg: EvoConfig, n_devices: int,
                         element_size: int = 2) -> dict[str, dict]:
    """Expected ledger of one sharded block run: per-category collective
    count and total bytes summed over devices."""
    if n_devices < 1:
        raise DomainError(f"device count must be positive, got {n_devices}")
    es = element_size
    n = n_devices
    m_bytes = cfg.n_seq * cfg.n_res * cfg.h_msa * es
    z_bytes = cfg.n_res * cfg.n_res * cfg.h_pair * es
    opm_factor = cfg.n_seq * cfg.n_res * cfg.hidden_proj * es
    tri_factor = cfg.n_res * cfg.n_res * cfg.hidden_proj * es
    bias_bytes = cfg.n_res * cfg.n_res * cfg.n_head_msa * es
    if n == 1:
        return {}
    # Totals are summed over devices: an axis switch moves K*(N-1)/N in
    # aggregate, a gather moves each shard to N-1 peers for K*(N-1).
    frac_gather = n - 1
    frac_switch = (n - 1) / n
    return {
        "all_to_all": {
            "count": 6,
            "bytes": round((2 * m_bytes + 4 * z_bytes) * frac_switch),
        },
        "all_gather": {
            "count": 3,
            "bytes": round((opm_factor + 2 * tri_factor) * frac_gather),
        },
        "bias_gather": {
            "count": 1,
            "bytes": round(bias_bytes * frac_gather),
        },
    }
