"""Deterministic dense tensor engine with an instrumented allocator.

All execution happens in 64-bit floats.  A 2-byte element size exists only
as a reporting convention for memory and communication accounting; it never
changes the arithmetic.

The allocator tracks live and peak bytes of every :class:`Tensor` buffer.
Raw numpy temporaries created inside an operation are not tracked: the
computation graph is fine-grained enough that each op's only real buffer is
its output.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DimensionError, DomainError

EXECUTION_ELEMENT_SIZE = 8
REPORTING_ELEMENT_SIZE = 2

# Additive mask value for excluded attention positions.  A large negative
# finite value instead of -inf, so that masked-only slices never produce NaN.
MASK_VALUE = -1e30


@dataclass(frozen=True)
class AllocStats:
    """Snapshot of allocator counters, in execution (8-byte) element size."""

    live_bytes: int
    peak_bytes: int
    element_size_model: int = REPORTING_ELEMENT_SIZE

    def in_element_size(self, element_size: int | None = None) -> "AllocStats":
        """Rescale the byte counters to a different per-element size."""
        es = self.element_size_model if element_size is None else element_size
        scale = es / EXECUTION_ELEMENT_SIZE
        return AllocStats(
            live_bytes=int(self.live_bytes * scale),
            peak_bytes=int(self.peak_bytes * scale),
            element_size_model=es,
        )


class Allocator:
    """Byte counter for tensor buffers.

    peak_bytes latches the maximum of live_bytes and is monotone between
    resets.  Every alloc/free is appended to an event log so the peak can be
    re-derived by replay (used as a self-check in the test suite).
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.live_bytes = 0
        self.peak_bytes = 0
        self.events: list[int] = []

    def alloc(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.live_bytes)
            self.events.append(nbytes)

    def free(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes -= nbytes
            self.events.append(-nbytes)

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.live_bytes
            self.events.clear()

    def stats(self) -> AllocStats:
        with self._lock:
            return AllocStats(self.live_bytes, self.peak_bytes)

    def replay_peak(self) -> int:
        """Recompute the peak from the event log (independent of the latch)."""
        with self._lock:
            live = self.live_bytes - sum(self.events)
            peak = live
            for delta in self.events:
                live += delta
                peak = max(peak, live)
            return peak


_default_allocator = Allocator()
_current_allocator: ContextVar[Allocator] = ContextVar(
    "evoplan_allocator", default=_default_allocator
)


def current_allocator() -> Allocator:
    return _current_allocator.get()


@contextmanager
def use_allocator(allocator: Allocator):
    """Route tensor allocations to ``allocator`` within the context."""
    token = _current_allocator.set(allocator)
    try:
        yield allocator
    finally:
        _current_allocator.reset(token)


def alloc_stats() -> AllocStats:
    return current_allocator().stats()


def reset_peak() -> None:
    current_allocator().reset_peak()


_tensor_ids = itertools.count()


class Tensor:
    """Immutable contiguous float64 array tracked by the current allocator."""

    __slots__ = ("data", "id", "_allocator", "_freed")

    def __init__(self, data) -> None:
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim < 1:
            arr = arr.reshape(1)
        self.data = arr
        self.id = next(_tensor_ids)
        self._allocator = current_allocator()
        self._freed = False
        self._allocator.alloc(arr.nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def free(self) -> None:
        """Release this buffer from the allocator's accounting (idempotent)."""
        if not self._freed:
            self._freed = True
            self._allocator.free(self.data.nbytes)

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape})"


# ---------------------------------------------------------------------------
# Raw kernels.  These operate on plain ndarrays and never touch the
# allocator; the Tensor-level wrappers and the graph executors wrap their
# results.
# ---------------------------------------------------------------------------


def matmul_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul contraction mismatch: {a.shape} x {b.shape}"
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"matmul leading dims must agree: {a.shape} x {b.shape}"
        )
    return np.matmul(a, b)


def softmax_raw(x: np.ndarray, axis: int) -> np.ndarray:
    if not (-x.ndim <= axis < x.ndim):
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if not np.all(np.isfinite(x)):
        raise DomainError("softmax input contains non-finite values")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def fused_softmax_mask_bias_raw(
    x: np.ndarray, mask: np.ndarray, bias: np.ndarray, axis: int
) -> np.ndarray:
    try:
        np.broadcast_shapes(x.shape, mask.shape, bias.shape)
    except ValueError as exc:
        raise DimensionError(
            f"mask/bias not broadcastable to {x.shape}: "
            f"mask {mask.shape}, bias {bias.shape}"
        ) from exc
    return softmax_raw(x + mask + bias, axis)


def layernorm_raw(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layernorm params must match last extent {x.shape[-1]}, "
            f"got gamma {gamma.shape}, beta {beta.shape}"
        )
    mean = np.mean(x, axis=-1, keepdims=True)
    # Population variance; eps inside the square root.
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def sigmoid_raw(x: np.ndarray) -> np.ndarray:
    return expit(x)


def relu_raw(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def add_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return a + b
    except ValueError as exc:
        raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}") from exc


def mul_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return a * b
    except ValueError as exc:
        raise DimensionError(f"mul shapes incompatible: {a.shape} * {b.shape}") from exc


def mean_over_axis_raw(x: np.ndarray, axis: int) -> np.ndarray:
    if not (-x.ndim <= axis < x.ndim):
        raise DimensionError(f"mean axis {axis} out of range for rank {x.ndim}")
    return np.mean(x, axis=axis)


def permute_raw(x: np.ndarray, perm) -> np.ndarray:
    if sorted(perm) != list(range(x.ndim)):
        raise DimensionError(f"permutation {perm} invalid for rank {x.ndim}")
    return np.ascontiguousarray(np.transpose(x, perm))


def concat_last_axis_raw(parts: list[np.ndarray]) -> np.ndarray:
    if not parts:
        raise DimensionError("concat needs at least one operand")
    lead = parts[0].shape[:-1]
    for part in parts[1:]:
        if part.shape[:-1] != lead:
            raise DimensionError(
                f"concat leading dims differ: {parts[0].shape} vs {part.shape}"
            )
    return np.concatenate(parts, axis=-1)


def slice_axis_raw(x: np.ndarray, axis: int, start: int, stop: int) -> np.ndarray:
    if not (0 <= axis < x.ndim):
        raise DimensionError(f"slice axis {axis} out of range for rank {x.ndim}")
    if not (0 <= start < stop <= x.shape[axis]):
        raise DimensionError(
            f"slice [{start}:{stop}] out of bounds for extent {x.shape[axis]}"
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return np.ascontiguousarray(x[tuple(index)])


# ---------------------------------------------------------------------------
# Tensor-level operations.
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(matmul_raw(a.data, b.data))


def softmax(x: Tensor, axis: int) -> Tensor:
    return Tensor(softmax_raw(x.data, axis))


def fused_softmax_mask_bias(x: Tensor, mask: Tensor, bias: Tensor, axis: int) -> Tensor:
    """softmax(x + mask + bias, axis) without materializing tracked intermediates.

    mask broadcasts over heads and the query index; bias broadcasts over the
    sequence/batch axis (both via standard right-aligned numpy broadcasting).
    The only tracked allocation is the output tensor.
    """
    return Tensor(fused_softmax_mask_bias_raw(x.data, mask.data, bias.data, axis))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return Tensor(layernorm_raw(x.data, gamma.data, beta.data, eps))


def sigmoid(x: Tensor) -> Tensor:
    return Tensor(sigmoid_raw(x.data))


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(add_raw(a.data, b.data))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(mul_raw(a.data, b.data))


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    return Tensor(mean_over_axis_raw(x.data, axis))


def permute(x: Tensor, perm) -> Tensor:
    return Tensor(permute_raw(x.data, perm))


def concat_last_axis(parts: list[Tensor]) -> Tensor:
    return Tensor(concat_last_axis_raw([p.data for p in parts]))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return Tensor(slice_axis_raw(x.data, axis, start, stop))
