"""Time-discretized H-valued paths and the path operations used everywhere else.

A path lives on a uniform grid t_j = j*T/M.  Times passed to any operation are
snapped to the nearest grid node, after which stopping, bumping and the running
sup-seminorm are exact (no interpolation).  Bumped paths stand in for the
cadlag objects needed by vertical derivatives: a bump at node j means the new
value holds from node j on.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .hilbert import HilbertVec


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with M steps (M+1 nodes)."""

    T: float
    steps: int

    def __post_init__(self):
        if self.T <= 0:
            raise ConfigurationError(f"horizon must be positive, got T={self.T}")
        if self.steps < 1:
            raise ConfigurationError(f"need at least one step, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    def node(self, t: float) -> int:
        """Index of the grid node nearest to t; t must lie in [0, T] up to rounding."""
        if t < -1e-12 * self.T or t > self.T * (1 + 1e-12):
            raise DomainError(f"time {t} outside [0, {self.T}]")
        return int(round(min(max(t, 0.0), self.T) / self.dt))

    def time_at(self, j: int) -> float:
        return j * self.dt


@dataclass(frozen=True)
class PathGrid:
    """An H-valued path sampled on a TimeGrid: values has shape (M+1, d)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.ndim != 2:
            raise ConfigurationError("path values must have shape (M+1, d)")
        if self.values.shape[0] != self.grid.steps + 1:
            raise ConfigurationError(
                f"path has {self.values.shape[0]} nodes, grid expects {self.grid.steps + 1}"
            )
        self.values.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def at(self, t: float) -> HilbertVec:
        return HilbertVec(self.values[self.grid.node(t)])

    def __add__(self, other: "PathGrid") -> "PathGrid":
        return PathGrid(self.grid, self.values + other.values)

    def __sub__(self, other: "PathGrid") -> "PathGrid":
        return PathGrid(self.grid, self.values - other.values)


def constant_path(grid: TimeGrid, c) -> PathGrid:
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return PathGrid(grid, np.tile(c, (grid.steps + 1, 1)))


def zero_path(grid: TimeGrid, d: int) -> PathGrid:
    return PathGrid(grid, np.zeros((grid.steps + 1, d)))


def stop(x: PathGrid, t: float) -> PathGrid:
    """The stopped path s -> x_{min(s,t)}, frozen at the node of t."""
    j = x.grid.node(t)
    return PathGrid(x.grid, stop_values(x.values, j))


def stop_values(values: np.ndarray, j: int) -> np.ndarray:
    """Array form of stopping at node j; works on (M+1, d) and (N, M+1, d) blocks."""
    out = values.copy()
    out[..., j + 1 :, :] = values[..., j : j + 1, :]
    return out


def bump(x: PathGrid, t: float, h: HilbertVec) -> PathGrid:
    """Add h to every node from the node of t onward (direction of a vertical derivative)."""
    if h.dim != x.dim:
        raise ConfigurationError(f"bump direction has dim {h.dim}, path has dim {x.dim}")
    j = x.grid.node(t)
    out = x.values.copy()
    out[j:, :] += h.coords
    return PathGrid(x.grid, out)


def sup_seminorm(x: PathGrid, t: float) -> float:
    """||x||_t: max of |x_s|_H over grid nodes s <= t (t snapped)."""
    j = x.grid.node(t)
    return float(np.sqrt((x.values[: j + 1] ** 2).sum(axis=1).max()))


def sup_norm(x: PathGrid) -> float:
    return sup_seminorm(x, x.grid.T)


def sup_seminorm_sq_values(values: np.ndarray, j: int) -> np.ndarray:
    """||.||_{t_j}^2 for a particle block of shape (N, M+1, d); returns (N,)."""
    return (values[:, : j + 1, :] ** 2).sum(axis=2).max(axis=1)


def path_to_csv(x: PathGrid) -> str:
    """CSV with header t,c1..cd; one row per node, 17 significant digits."""
    buf = io.StringIO()
    d = x.dim
    buf.write("t," + ",".join(f"c{k + 1}" for k in range(d)) + "\n")
    times = x.grid.times
    for j in range(x.grid.steps + 1):
        row = [f"{times[j]:.17g}"] + [f"{v:.17g}" for v in x.values[j]]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def path_from_csv(text: str) -> PathGrid:
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")
    if header[0] != "t" or len(header) < 2:
        raise ConfigurationError("path CSV must start with header t,c1..cd")
    rows = [list(map(float, ln.split(","))) for ln in lines[1:]]
    arr = np.asarray(rows, dtype=float)
    times, values = arr[:, 0], arr[:, 1:]
    if len(times) < 2:
        raise ConfigurationError("path CSV needs at least two nodes")
    grid = TimeGrid(T=float(times[-1]), steps=len(times) - 1)
    return PathGrid(grid, values)
