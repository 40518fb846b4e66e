"""Exception types shared across the toolkit."""


class EvoplanError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(EvoplanError):
    """Shapes or axes do not conform for an operation."""


class DomainError(EvoplanError):
    """Numerically invalid input (e.g. non-finite values where finite required)."""


class GraphFormatError(EvoplanError):
    """A serialized graph or plan document failed validation."""


class PlanError(EvoplanError):
    """A chunk plan is illegal for the graph it targets."""


class InfeasibleBudgetError(EvoplanError):
    """No chunk plan can bring peak memory under the requested budget."""

    def __init__(self, budget: int, min_peak: int):
        self.budget = budget
        self.min_peak = min_peak
        super().__init__(
            f"budget of {budget} bytes is infeasible; minimum achievable "
            f"peak is {min_peak} bytes"
        )


class ShardError(EvoplanError):
    """A tensor cannot be sharded as requested."""


class MeshError(EvoplanError):
    """Device mesh is incompatible with the tensor extents."""


class HeadLimitError(EvoplanError):
    """Tensor parallelism cannot scale past the attention head count."""

    def __init__(self, n_devices: int, n_heads: int):
        self.n_devices = n_devices
        self.n_heads = n_heads
        super().__init__(
            f"tensor parallelism over {n_devices} devices exceeds the "
            f"head-count limit of {n_heads}"
        )


class ScheduleError(EvoplanError):
    """The event timeline is malformed (e.g. contains a dependency cycle)."""
