"""Time grids with history/future extensions, counter-based Brownian
increments and per-path value storage.

Node ``i`` of a :class:`TimeGrid` sits at ``t_i = (i - history_nodes) * h``.
Nodes ``0 .. history_nodes - 1`` cover the truncated past ``[-span, 0)``,
node ``history_nodes`` is ``t = 0``, node ``history_nodes + n_steps`` is
``t = T`` and everything after it is the truncated future ``(T, T + span]``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import LagMisaligned

__all__ = [
    "TimeGrid",
    "IncrementEnsemble",
    "PathEnsemble",
    "make_grid",
    "brownian_increments",
    "extend_with_history",
    "worker_count",
]

_LAG_RTOL = 1e-12
_MASK64 = (1 << 64) - 1
THREADS_ENV = "ANTICIP_SMP_THREADS"


@dataclass(frozen=True)
class TimeGrid:
    h: float
    n_steps: int
    history_nodes: int = 0
    future_nodes: int = 0
    lag_indices: tuple = ()

    @property
    def T(self) -> float:
        return self.n_steps * self.h

    @property
    def n_nodes(self) -> int:
        return self.history_nodes + self.n_steps + 1 + self.future_nodes

    @property
    def zero(self) -> int:
        """Index of the node at ``t = 0``."""
        return self.history_nodes

    @property
    def end(self) -> int:
        """Index of the node at ``t = T``."""
        return self.history_nodes + self.n_steps

    @property
    def times(self) -> np.ndarray:
        return (np.arange(self.n_nodes) - self.history_nodes) * self.h

    @property
    def control_nodes(self) -> np.ndarray:
        """Nodes ``t_0 .. t_{n-1}`` carrying left-point time integrals."""
        return np.arange(self.zero, self.end)

    def time(self, i: int) -> float:
        return (i - self.history_nodes) * self.h

    def node(self, t: float) -> int:
        """Nearest node index of time ``t``."""
        return int(round(t / self.h)) + self.history_nodes

    def lag_index(self, lag: float) -> int:
        """Integer number of steps in ``lag``; raises if ``lag`` is off-grid."""
        return _aligned_index(lag, self.h)

    def history_span(self) -> float:
        return self.history_nodes * self.h

    def future_span(self) -> float:
        return self.future_nodes * self.h


def _aligned_index(lag: float, h: float) -> int:
    if lag < 0:
        raise LagMisaligned(f"lag {lag!r} is negative")
    k = int(round(lag / h))
    if abs(lag - k * h) > _LAG_RTOL * h:
        raise LagMisaligned(
            f"lag {lag!r} is not a multiple of the step h={h!r}; "
            "choose n_steps so that lag * n_steps / T is an integer"
        )
    return k


def _span_nodes(span: float, h: float) -> int:
    # tolerance keeps e.g. 0.3 / 0.1 = 2.9999999999999996 at 3 nodes
    return max(0, math.ceil(span / h - 1e-9))


def make_grid(
    T: float,
    n_steps: int,
    lags: Sequence[float] = (),
    history_span: float = 0.0,
    future_span: float = 0.0,
) -> TimeGrid:
    """Build a uniform grid on ``[0, T]`` with extensions on both sides.

    Every lag must be an integer multiple of ``h = T / n_steps``. The
    extensions are widened, if needed, so that every registered lag index
    fits before node ``t = 0`` and after node ``t = T``.

    Examples
    --------
    >>> g = make_grid(1.0, 10, lags=[0.3], history_span=0.3, future_span=0.3)
    >>> g.lag_indices, g.history_nodes
    ((3,), 3)
    """
    if not T > 0:
        raise ValueError(f"T must be positive, got {T!r}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps!r}")
    if history_span < 0 or future_span < 0:
        raise ValueError("extension spans must be nonnegative")
    n_steps = int(n_steps)
    h = T / n_steps
    ks = tuple(_aligned_index(float(lag), h) for lag in lags)
    kmax = max(ks, default=0)
    return TimeGrid(
        h=h,
        n_steps=n_steps,
        history_nodes=max(_span_nodes(history_span, h), kmax),
        future_nodes=max(_span_nodes(future_span, h), kmax),
        lag_indices=ks,
    )


def worker_count(workers: int | None = None) -> int:
    """Resolve the worker cap; ``ANTICIP_SMP_THREADS`` applies when unset."""
    if workers is None:
        workers = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(workers))


@dataclass(frozen=True)
class IncrementEnsemble:
    """Brownian increments ``dW[path, step]`` for the steps of ``[0, T)``."""

    seed: int
    n_paths: int
    h: float
    increments: np.ndarray = field(repr=False)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def brownian(self) -> np.ndarray:
        """``W`` at nodes ``t_0 .. t_n``, shape ``(n_paths, n_steps + 1)``."""
        w = np.zeros((self.n_paths, self.n_steps + 1))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return w

    def coarsen(self, factor: int) -> "IncrementEnsemble":
        """Sum consecutive blocks of ``factor`` steps (same Brownian path)."""
        if self.n_steps % factor:
            raise ValueError(f"{self.n_steps} steps not divisible by {factor}")
        inc = self.increments.reshape(self.n_paths, -1, factor).sum(axis=2)
        return IncrementEnsemble(self.seed, self.n_paths, self.h * factor, inc)


def _path_normals(seed: int, path: int, n_steps: int) -> np.ndarray:
    # Philox keyed by (seed, path): draw i is the i-th counter value of that
    # key, so each increment is a pure function of (seed, path, step).
    bits = np.random.Philox(key=((seed & _MASK64) << 64) | path).random_raw(n_steps)
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def brownian_increments(
    grid: TimeGrid, n_paths: int, seed: int, workers: int | None = None
) -> IncrementEnsemble:
    """Generate ``N(0, h)`` increments for ``n_paths`` paths on ``grid``.

    The value for ``(path, step)`` depends only on ``(seed, path, step)``;
    the worker count changes speed, never the bits.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths!r}")
    n = grid.n_steps
    out = np.empty((n_paths, n))
    sqrt_h = math.sqrt(grid.h)

    def fill(rows: range) -> None:
        for p in rows:
            out[p] = _path_normals(seed, p, n)

    nw = min(worker_count(workers), n_paths)
    if nw == 1:
        fill(range(n_paths))
    else:
        bounds = np.linspace(0, n_paths, nw + 1).astype(int)
        with ThreadPoolExecutor(nw) as pool:
            list(pool.map(fill, [range(a, b) for a, b in zip(bounds[:-1], bounds[1:])]))
    out *= sqrt_h
    return IncrementEnsemble(int(seed), int(n_paths), grid.h, out)


@dataclass(frozen=True)
class PathEnsemble:
    """Per-path values on every node of ``grid`` (extensions included)."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[None, :]
        if v.shape[1] != self.grid.n_nodes:
            raise ValueError(
                f"values have {v.shape[1]} nodes, grid has {self.grid.n_nodes}"
            )
        object.__setattr__(self, "values", v)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def interior(self) -> np.ndarray:
        """Values on ``[0, T]``."""
        return self.values[:, self.grid.zero : self.grid.end + 1]

    def at(self, t: float) -> np.ndarray:
        return self.values[:, self.grid.node(t)]

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def stderr(self) -> np.ndarray:
        if self.n_paths < 2:
            return np.zeros(self.grid.n_nodes)
        return self.values.std(axis=0, ddof=1) / math.sqrt(self.n_paths)

    def is_deterministic(self) -> bool:
        return bool(np.all(self.values == self.values[:1]))

    @classmethod
    def zeros(cls, grid: TimeGrid, n_paths: int = 1) -> "PathEnsemble":
        return cls(grid, np.zeros((n_paths, grid.n_nodes)))

    @classmethod
    def from_function(
        cls, grid: TimeGrid, fn: Callable[[np.ndarray], np.ndarray], n_paths: int = 1
    ) -> "PathEnsemble":
        row = np.broadcast_to(np.asarray(fn(grid.times), dtype=float), (grid.n_nodes,))
        return cls(grid, np.tile(row, (n_paths, 1)))


def extend_with_history(
    ensemble: PathEnsemble,
    history_fn: Callable[[np.ndarray], np.ndarray],
    which: str = "both",
) -> PathEnsemble:
    """Fill extension nodes by sampling ``history_fn`` at their times.

    ``which`` selects ``"history"`` (t < 0), ``"future"`` (t > T) or
    ``"both"``. Nodes on ``[0, T]`` are left untouched.
    """
    if which not in ("both", "history", "future"):
        raise ValueError(f"unknown extension {which!r}")
    g = ensemble.grid
    vals = ensemble.values.copy()
    t = g.times
    if which in ("both", "history") and g.history_nodes:
        idx = slice(0, g.zero)
        vals[:, idx] = np.broadcast_to(np.asarray(history_fn(t[idx]), float), vals[:, idx].shape)
    if which in ("both", "future") and g.future_nodes:
        idx = slice(g.end + 1, None)
        vals[:, idx] = np.broadcast_to(np.asarray(history_fn(t[idx]), float), vals[:, idx].shape)
    return PathEnsemble(g, vals)
