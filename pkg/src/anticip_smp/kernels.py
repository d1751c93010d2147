"""Discretized measure kernels for delayed and anticipated averages.

A kernel is a list of atoms ``(k_j, m_j)`` on the lag axis together with a
density ``phi(s, t)`` taking the earlier time first. The delay operator at
node ``i`` is

    (K_d x)(i) = sum_j m_j * phi(t_{i-k_j}, t_i) * x(i - k_j)

and the anticipation operator is

    (K_a x)(i) = sum_j m_j * phi(t_i, t_{i+k_j}) * x(i + k_j).

Both evaluate one weight function on the same ``(earlier, later)`` node pair,
so ``K_a`` is the literal transpose of ``K_d``. Continuous densities are
discretized with the left-endpoint rule on the lag axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import IndexOverflow, IndexUnderflow, TailTooWide
from .gridrng import PathEnsemble, TimeGrid

__all__ = [
    "MeasureSpec",
    "DelayKernel",
    "discretize_measure",
    "delay_apply",
    "delay_all",
    "anticipate_raw",
    "anticipate_all_raw",
    "anticipate_apply",
    "anticipate_all",
    "adjoint_pairing_check",
]

Density = Callable[[np.ndarray, np.ndarray], np.ndarray]

# caps the (paths, nodes, atoms) gather buffer of the bulk operators
_GATHER_BUDGET = 4_000_000


@dataclass(frozen=True)
class MeasureSpec:
    """Continuous description of a lag measure and its density.

    ``kind`` is one of ``"dirac"``, ``"exponential"``, ``"uniform"`` or
    ``"atoms"``. ``cutoff`` multiplies the density by ``1{later < cutoff}``,
    which is how the "integrate up to the horizon" averages are written.
    """

    kind: str
    lag: float = 0.0
    rate: float = 1.0
    tail_tol: float = 1e-6
    width: float = 0.0
    atoms: tuple = ()
    density: Optional[Density] = field(default=None, compare=False)
    density_bound: float = 1.0
    cutoff: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("dirac", "exponential", "uniform", "atoms"):
            raise ValueError(f"unknown measure kind {self.kind!r}")
        if self.lag < 0 or self.width < 0 or self.rate <= 0:
            raise ValueError("lags and widths must be >= 0 and rates > 0")
        if self.kind == "exponential" and not 0 < self.tail_tol < 1:
            raise ValueError(f"tail_tol must lie in (0, 1), got {self.tail_tol!r}")
        for lag, mass in self.atoms:
            if lag < 0 or not math.isfinite(mass):
                raise ValueError(f"bad atom ({lag!r}, {mass!r})")

    @classmethod
    def dirac(cls, lag: float, **kw) -> "MeasureSpec":
        return cls("dirac", lag=float(lag), **kw)

    @classmethod
    def exponential(cls, rate: float, tail_tol: float = 1e-6, **kw) -> "MeasureSpec":
        return cls("exponential", rate=float(rate), tail_tol=float(tail_tol), **kw)

    @classmethod
    def uniform(cls, width: float, **kw) -> "MeasureSpec":
        return cls("uniform", width=float(width), **kw)

    @classmethod
    def from_atoms(cls, atoms: Sequence[tuple], **kw) -> "MeasureSpec":
        return cls("atoms", atoms=tuple((float(a), float(m)) for a, m in atoms), **kw)

    @property
    def truncation_span(self) -> float:
        """Largest lag kept after truncation (before grid rounding)."""
        if self.kind == "dirac":
            return self.lag
        if self.kind == "uniform":
            return self.width
        if self.kind == "atoms":
            return max((a for a, _ in self.atoms), default=0.0)
        # tail mass int_S^inf e^{-rate s} ds = e^{-rate S} / rate <= tail_tol
        return max(0.0, -math.log(self.rate * self.tail_tol) / self.rate)

    def to_dict(self) -> dict:
        if self.density is not None:
            raise ValueError("custom densities cannot be serialized")
        d: dict = {"type": self.kind}
        if self.kind == "dirac":
            d["lag"] = self.lag
        elif self.kind == "exponential":
            d.update(rate=self.rate, tail_tol=self.tail_tol)
        elif self.kind == "uniform":
            d["width"] = self.width
        else:
            d["atoms"] = [list(a) for a in self.atoms]
        if self.cutoff is not None:
            d["cutoff"] = self.cutoff
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MeasureSpec":
        d = dict(d)
        kind = d.pop("type")
        cutoff = d.pop("cutoff", None)
        if kind == "dirac":
            return cls.dirac(d.pop("lag"), cutoff=cutoff)
        if kind == "exponential":
            return cls.exponential(d.pop("rate"), d.pop("tail_tol", 1e-6), cutoff=cutoff)
        if kind == "uniform":
            return cls.uniform(d.pop("width"), cutoff=cutoff)
        if kind == "atoms":
            return cls.from_atoms(d.pop("atoms"), cutoff=cutoff)
        raise ValueError(f"unknown measure type {kind!r}")


@dataclass(frozen=True)
class DelayKernel:
    lags: np.ndarray = field(repr=False)
    masses: np.ndarray = field(repr=False)
    h: float
    density: Optional[Density] = field(default=None, compare=False)
    density_bound: float = 1.0
    cutoff: Optional[float] = None
    _stencils: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def max_lag(self) -> int:
        return int(self.lags.max()) if self.lags.size else 0

    @property
    def truncation_span(self) -> float:
        return self.max_lag * self.h

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def total_bound(self) -> float:
        """``C_phi * C_alpha`` of the discretized kernel."""
        return self.density_bound * float(np.abs(self.masses).sum())

    def weights(self, earlier: np.ndarray, later: np.ndarray) -> np.ndarray:
        """Atom weights for node-time pairs; broadcasts against ``masses``."""
        w = np.broadcast_to(self.masses, np.broadcast(earlier, later, self.masses).shape)
        if self.density is not None:
            w = w * self.density(earlier, later)
        if self.cutoff is not None:
            w = w * (later < self.cutoff - 0.5 * self.h)
        return w


def discretize_measure(spec: MeasureSpec, grid: TimeGrid) -> DelayKernel:
    """Turn ``spec`` into grid atoms (left-endpoint rule on the lag axis)."""
    h = grid.h
    if spec.kind == "dirac":
        lags = np.array([grid.lag_index(spec.lag)])
        masses = np.array([1.0])
    elif spec.kind == "atoms":
        acc: dict = {}
        for lag, mass in spec.atoms:
            k = grid.lag_index(lag)
            acc[k] = acc.get(k, 0.0) + mass
        lags = np.array(sorted(acc), dtype=int)
        masses = np.array([acc[k] for k in lags])
    elif spec.kind == "exponential":
        n_atoms = max(1, math.ceil(spec.truncation_span / h - 1e-9))
        lags = np.arange(n_atoms)
        masses = np.exp(-spec.rate * lags * h) * h
    else:
        full = int(math.floor(spec.width / h + 1e-9))
        rest = spec.width - full * h
        if rest > 1e-9 * h:
            lags = np.arange(full + 1)
            masses = np.full(full + 1, h)
            masses[-1] = rest
        else:
            lags = np.arange(max(full, 1))
            masses = np.full(lags.size, h)
            masses[-1] = spec.width - h * (lags.size - 1)
    kernel = DelayKernel(
        lags=lags.astype(int),
        masses=masses.astype(float),
        h=h,
        density=spec.density,
        density_bound=spec.density_bound,
        cutoff=spec.cutoff,
    )
    need = kernel.max_lag
    if need > min(grid.history_nodes, grid.future_nodes):
        raise TailTooWide(
            f"kernel reaches {need} nodes ({need * h:.6g} time units) but the grid "
            f"extends {grid.history_nodes} back and {grid.future_nodes} forward"
        )
    return kernel


def _values(x) -> np.ndarray:
    v = x.values if isinstance(x, PathEnsemble) else np.asarray(x, dtype=float)
    return v[None, :] if v.ndim == 1 else v


def _grid_of(x, grid):
    if grid is not None:
        return grid
    if isinstance(x, PathEnsemble):
        return x.grid
    raise TypeError("grid is required when x is a plain array")


def delay_apply(kernel: DelayKernel, x, i: int, grid: TimeGrid = None) -> np.ndarray:
    """Delayed average at node ``i``, one value per path."""
    return delay_all(kernel, x, np.array([i]), grid)[:, 0]


def anticipate_raw(kernel: DelayKernel, x, i: int, grid: TimeGrid = None) -> np.ndarray:
    """Forward average at node ``i`` before any conditional expectation."""
    return anticipate_all_raw(kernel, x, np.array([i]), grid)[:, 0]


def _stencil(kernel, nodes, grid, sign):
    # weights depend only on (grid, nodes, direction); solvers reuse them every sweep
    key = (grid, sign, nodes.tobytes())
    hit = kernel._stencils.get(key)
    if hit is not None:
        return hit
    other = nodes[:, None] + sign * kernel.lags[None, :]
    t = grid.times
    if sign < 0:
        w = kernel.weights(t[other], t[nodes][:, None])
    else:
        w = kernel.weights(t[nodes][:, None], t[other])
    if len(kernel._stencils) > 64:
        kernel._stencils.clear()
    kernel._stencils[key] = (other, np.ascontiguousarray(w))
    return kernel._stencils[key]


def _bulk(kernel, v, nodes, grid, sign):
    nodes = np.asarray(nodes, dtype=int)
    if nodes.size and kernel.lags.size:
        reach = sign * kernel.lags
        lo, hi = nodes.min() + reach.min(), nodes.max() + reach.max()
        if lo < 0:
            raise IndexUnderflow(f"delay reaches node {lo} < 0; widen the history")
        if hi >= v.shape[1]:
            raise IndexOverflow(f"anticipation reaches node {hi}; widen the future")
    other, w = _stencil(kernel, nodes, grid, sign)
    out = np.empty((v.shape[0], nodes.size))
    step = max(1, _GATHER_BUDGET // max(1, v.shape[0] * kernel.lags.size))
    for a in range(0, nodes.size, step):
        b = min(a + step, nodes.size)
        out[:, a:b] = np.einsum("pnk,nk->pn", v[:, other[a:b]], w[a:b])
    return out


def delay_all(kernel: DelayKernel, x, nodes, grid: TimeGrid = None) -> np.ndarray:
    """Delayed averages at several nodes, shape ``(paths, len(nodes))``."""
    return _bulk(kernel, _values(x), nodes, _grid_of(x, grid), -1)


def anticipate_all_raw(kernel: DelayKernel, x, nodes, grid: TimeGrid = None) -> np.ndarray:
    return _bulk(kernel, _values(x), nodes, _grid_of(x, grid), +1)


def anticipate_apply(kernel, x, i, estimator, brownian=None, grid=None) -> np.ndarray:
    """Conditional expectation at node ``i`` of the forward average.

    ``brownian`` holds ``W(t_i)`` per path; it is what regression-type
    estimators condition on and is ignored by the deterministic one.
    """
    grid = _grid_of(x, grid)
    raw = anticipate_raw(kernel, x, i, grid)
    w = None if brownian is None else np.asarray(brownian)
    return estimator.expect(raw, w, grid.time(i))


def anticipate_all(kernel, x, nodes, estimator, brownian=None, grid=None) -> np.ndarray:
    """:func:`anticipate_apply` over ``nodes``.

    ``brownian`` is ``W`` at the grid's nodes ``t_0 .. t_n`` with shape
    ``(paths, n_steps + 1)``.
    """
    grid = _grid_of(x, grid)
    nodes = np.asarray(nodes, dtype=int)
    raw = anticipate_all_raw(kernel, x, nodes, grid)
    bulk = getattr(estimator, "expect_columns", None)
    if bulk is not None:
        w = None if brownian is None else brownian[:, nodes - grid.zero]
        return bulk(raw, w, grid.times[nodes])
    out = np.empty_like(raw)
    for c, i in enumerate(nodes):
        w = None if brownian is None else brownian[:, i - grid.zero]
        out[:, c] = estimator.expect(raw[:, c], w, grid.time(i))
    return out


def adjoint_pairing_check(
    kernel: DelayKernel, p, x, grid: TimeGrid = None, relative: bool = False
) -> float:
    """Gap between ``<p, K_a x>`` and ``<K_d p, x>`` over ``[0, T)``.

    Both pairings are left-point time integrals averaged over paths. The
    gap vanishes up to round-off when ``p`` is zero before ``t = 0`` and
    ``x`` is zero from ``t = T`` on. With ``relative=True`` the gap is
    divided by the absolute-value pairing ``<|p|, |K_a| |x|>``.
    """
    grid = _grid_of(p, grid)
    pv, xv = _values(p), _values(x)
    nodes = grid.control_nodes
    lhs = np.sum(pv[:, nodes] * anticipate_all_raw(kernel, xv, nodes, grid), axis=1)
    rhs = np.sum(delay_all(kernel, pv, nodes, grid) * xv[:, nodes], axis=1)
    gap = float(np.mean(lhs - rhs)) * grid.h
    if not relative:
        return gap
    abs_kernel = DelayKernel(
        kernel.lags,
        np.abs(kernel.masses),
        kernel.h,
        None if kernel.density is None else (lambda s, t: np.abs(kernel.density(s, t))),
        kernel.density_bound,
        kernel.cutoff,
    )
    scale = np.mean(
        np.sum(np.abs(pv[:, nodes]) * anticipate_all_raw(abs_kernel, np.abs(xv), nodes, grid), axis=1)
    ) * grid.h
    return abs(gap) / scale if scale > 0 else abs(gap)
