"""Time partitions of [0, T]: uniform grids and grids graded toward the horizon.

Graded partitions t_i = T*(1 - (1 - i/n)**beta) concentrate points near T and
compensate for the derivative blow-up of the value function when the terminal
condition is only Lipschitz.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class Partition:
    """Ordered time grid 0 = t_0 < t_1 < ... < t_n = T."""

    points: np.ndarray
    kind: str  # "uniform" or "graded"
    beta: float | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts[0] != 0.0:
            raise InvalidArgumentError("partition must start at 0")
        if np.any(np.diff(pts) <= 0.0):
            raise InvalidArgumentError("partition points must be strictly increasing")

    @property
    def n(self):
        return len(self.points) - 1

    @property
    def horizon(self):
        return float(self.points[-1])

    @property
    def deltas(self) -> np.ndarray:
        """Step sizes delta_i = t_i - t_{i-1}, i = 1..n."""
        return np.diff(self.points)


def uniform(n: int, horizon: float) -> Partition:
    """Uniform partition with n steps: t_i = i*T/n."""
    if n < 1:
        raise InvalidArgumentError(f"need n >= 1, got {n}")
    if horizon <= 0.0:
        raise InvalidArgumentError(f"need horizon > 0, got {horizon}")
    pts = np.linspace(0.0, horizon, n + 1)
    pts[-1] = horizon
    return Partition(pts, kind="uniform")


def graded(n: int, horizon: float, beta: float = 5.0) -> Partition:
    """Graded partition t_i = T*(1 - (1 - i/n)**beta), denser toward T.

    beta = 1 reduces to the uniform grid; beta < 1 would coarsen toward T and
    is rejected. The final point is assigned T exactly rather than through the
    formula so the terminal condition is evaluated free of rounding drift.
    """
    if n < 2:
        raise InvalidArgumentError(f"graded partition needs n >= 2, got {n}")
    if horizon <= 0.0:
        raise InvalidArgumentError(f"need horizon > 0, got {horizon}")
    if beta < 1.0:
        raise InvalidArgumentError(f"need beta >= 1 (mesh would coarsen toward T), got {beta}")
    i = np.arange(n + 1, dtype=float)
    pts = horizon * (1.0 - (1.0 - i / n) ** beta)
    pts[-1] = horizon
    return Partition(pts, kind="graded", beta=float(beta))
