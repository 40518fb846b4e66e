"""Simulated device mesh, sharded tensors and collectives with byte ledgers.

All devices live in one process; a collective is a deterministic numpy
shuffle plus ledger entries recording exactly what each device would send.
Per-device send volumes follow the usual cost conventions:

  all-to-all axis switch   K * (N - 1) / N**2
  all-gather               K * (N - 1) / N
  ring all-reduce          2 * K * (N - 1) / N

where K is the byte size of the full logical tensor and N the device count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MeshError, ShardError

REPORTING_ELEMENT_SIZE = 2


@dataclass(frozen=True)
class DeviceMesh:
    """One-dimensional mesh of simulated devices.

    device_order only affects iteration order inside collectives; results
    and ledgers are invariant to it (device identity is the canonical rank).
    """

    n_devices: int
    device_order: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.n_devices < 1:
            raise MeshError(f"need at least one device, got {self.n_devices}")
        order = self.device_order or tuple(range(self.n_devices))
        if sorted(order) != list(range(self.n_devices)):
            raise MeshError(f"device_order {order} is not a permutation of "
                            f"range({self.n_devices})")
        object.__setattr__(self, "device_order", tuple(order))


class CommLedger:
    """Per-device, per-category record of collective traffic.

    Bytes are logical sends under the reporting element size; a device never
    "sends" its own retained block.
    """

    def __init__(self, n_devices: int,
                 element_size: int = REPORTING_ELEMENT_SIZE):
        self.n_devices = n_devices
        self.element_size = element_size
        self.counts: dict[str, int] = {}
        self.bytes: dict[str, list[int]] = {}

    def record(self, category: str, per_device_elements: list[int]) -> None:
        if len(per_device_elements) != self.n_devices:
            raise MeshError("ledger entry must cover every device")
        self.counts[category] = self.counts.get(category, 0) + 1
        row = self.bytes.setdefault(category, [0] * self.n_devices)
        for d, elems in enumerate(per_device_elements):
            row[d] += elems * self.element_size

    def total_bytes(self, category: str | None = None) -> int:
        if category is not None:
            return sum(self.bytes.get(category, []))
        return sum(sum(v) for v in self.bytes.values())

    def device_bytes(self, device: int) -> int:
        return sum(v[device] for v in self.bytes.values())

    def to_json(self) -> str:
        per_device = [
            {cat: {"count": self.counts[cat], "bytes": self.bytes[cat][d]}
             for cat in sorted(self.counts)}
            for d in range(self.n_devices)
        ]
        totals = {cat: {"count": self.counts[cat],
                        "bytes": sum(self.bytes[cat])}
                  for cat in sorted(self.counts)}
        return json.dumps({
            "schema": "evoplan-ledger-v1",
            "n_devices": self.n_devices,
            "element_size": self.element_size,
            "per_device": per_device,
            "totals": totals,
        }, sort_keys=True)


@dataclass
class ShardedTensor:
    """A tensor split along one axis, one block per canonical device rank."""

    mesh: DeviceMesh
    axis: int
    parts: list[np.ndarray] = field(repr=False)

    @property
    def full_shape(self) -> tuple[int, ...]:
        shape = list(self.parts[0].shape)
        shape[self.axis] = sum(p.shape[self.axis] for p in self.parts)
        return tuple(shape)

    @property
    def full_elements(self) -> int:
        return int(np.prod(self.full_shape, dtype=np.int64))


def shard(x: np.ndarray, axis: int, mesh: DeviceMesh) -> ShardedTensor:
    n = mesh.n_devices
    if not (0 <= axis < x.ndim):
        raise ShardError(f"shard axis {axis} out of range for rank {x.ndim}")
    if x.shape[axis] % n != 0:
        raise ShardError(
            f"extent {x.shape[axis]} on axis {axis} not divisible by "
            f"{n} devices")
    parts = [np.ascontiguousarray(p) for p in np.split(x, n, axis=axis)]
    return ShardedTensor(mesh, axis, parts)


def unshard(t: ShardedTensor) -> np.ndarray:
    return np.concatenate(t.parts, axis=t.axis)


def all_to_all_switch_axis(t: ShardedTensor, new_axis: int,
                           ledger: CommLedger | None = None,
                           category: str = "all_to_all") -> ShardedTensor:
    """Re-shard from t.axis to new_axis with a single all-to-all.

    Each device splits its block along new_axis and sends all pieces but its
    own; the result on each device is full along the old axis.
    """
    mesh = t.mesh
    n = mesh.n_devices
    if new_axis == t.axis:
        return t
    if t.parts[0].shape[new_axis] % n != 0:
        raise ShardError(
            f"extent {t.parts[0].shape[new_axis]} on axis {new_axis} not "
            f"divisible by {n} devices")
    if n == 1:
        return ShardedTensor(mesh, new_axis, [t.parts[0]])
    # pieces[src][dst]: block held by src destined for dst
    pieces: dict[int, list[np.ndarray]] = {}
    for src in mesh.device_order:
        pieces[src] = np.split(t.parts[src], n, axis=new_axis)
    out_parts: list[np.ndarray | None] = [None] * n
    for dst in mesh.device_order:
        out_parts[dst] = np.ascontiguousarray(
            np.concatenate([pieces[src][dst] for src in range(n)], axis=t.axis))
    if ledger is not None:
        sent = t.parts[0].size - t.parts[0].size // n
        ledger.record(category, [sent] * n)
    return ShardedTensor(mesh, new_axis, out_parts)  # type: ignore[arg-type]


def all_gather(t: ShardedTensor, ledger: CommLedger | None = None,
               category: str = "all_gather") -> np.ndarray:
    """Materialize the full tensor on every device; returns one copy."""
    mesh = t.mesh
    full = None
    for _ in mesh.device_order:
        gathered = np.concatenate(t.parts, axis=t.axis)
        if full is None:
            full = gathered
    if ledger is not None and mesh.n_devices > 1:
        ledger.record(category,
                      [p.size * (mesh.n_devices - 1) for p in t.parts])
    return full


def ring_all_reduce(parts: list[np.ndarray], mesh: DeviceMesh,
                    ledger: CommLedger | None = None,
                    category: str = "all_reduce") -> np.ndarray:
    """Sum identical-shape per-device buffers with a ring all-reduce.

    Implemented as reduce-scatter followed by all-gather over flattened
    blocks; per-device send volume is 2 * K * (N - 1) / N.
    """
    n = mesh.n_devices
    if len(parts) != n:
        raise MeshError(f"expected {n} buffers, got {len(parts)}")
    shape = parts[0].shape
    if any(p.shape != shape for p in parts):
        raise ShardError("all-reduce buffers must share a shape")
    if n == 1:
        return parts[0].copy()
    flat = [p.reshape(-1).astype(np.float64, copy=True) for p in parts]
    pad = (-flat[0].size) % n
    if pad:
        flat = [np.concatenate([f, np.zeros(pad)]) for f in flat]
    blocks = [np.split(f, n) for f in flat]
    # reduce-scatter: after n-1 steps device d owns the sum of block
    # (d + 1) mod n; the simulation just sums columns.
    owned = [sum(blocks[src][(d + 1) % n] for src in range(n))
             for d in mesh.device_order]
    owned = [owned[mesh.device_order.index(d)] for d in range(n)]
    # all-gather the reduced blocks back around the ring
    result = np.empty(flat[0].size)
    for d in range(n):
        result[((d + 1) % n) * len(owned[0]):((d + 1) % n + 1) * len(owned[0])] = owned[d]
    if ledger is not None:
        block_elems = parts[0].size / n
        sent = int(round(2 * block_elems * (n - 1)))
        ledger.record(category, [sent] * n)
    out = result[:parts[0].size] if pad else result
    return out.reshape(shape)
