"""Conditional-expectation estimators ``E[X | F_t]`` on a path ensemble.

Every estimator maps a per-path sample of ``X`` plus the per-path value of
``W(t)`` to a per-path estimate of ``E[X | F_t]``. Conditioning is on
``W(t)`` alone, which is exact for Markov functionals of the Brownian path
and a projection otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EstimatorMismatch, RegressionSingular

__all__ = ["ConditionalEstimator", "Deterministic", "PolyRegression", "NestedMC", "estimator_from_dict"]

# relative eigenvalue floor of the Gram matrix below which the basis is rank deficient
_RANK_RTOL = 1e-12


class ConditionalEstimator:
    """Interface: ``expect`` and the ``Z``-type product ``expect_increment``."""

    def expect(self, target, w=None, t=0.0):
        raise NotImplementedError

    def expect_increment(self, target, dw, w=None, t=0.0):
        """Estimate ``E[target * dW | F_t]``."""
        return self.expect(np.asarray(target) * dw, w, t)

    def expect_pair(self, target, dw, w=None, t=0.0):
        """``(E[target | F_t], E[target * dW | F_t])`` in one call."""
        return self.expect(target, w, t), self.expect_increment(target, dw, w, t)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Deterministic(ConditionalEstimator):
    """Pass-through for path-constant data; anything else is an error."""

    def expect(self, target, w=None, t=0.0):
        target = np.asarray(target, dtype=float)
        if target.size and not np.all(target == target[0]):
            raise EstimatorMismatch(
                "deterministic estimator received path-dependent values; "
                "use PolyRegression or NestedMC"
            )
        return target.copy()

    def expect_columns(self, targets, w=None, times=None):
        """:meth:`expect` applied to every column of ``targets`` at once."""
        targets = np.asarray(targets, dtype=float)
        if targets.size and not np.all(targets == targets[:1]):
            raise EstimatorMismatch(
                "deterministic estimator received path-dependent values; "
                "use PolyRegression or NestedMC"
            )
        return targets.copy()

    def expect_increment(self, target, dw, w=None, t=0.0):
        # E[c dW | F_t] = c E[dW] = 0 for a known constant c
        self.expect(target)
        return np.zeros(np.shape(target))

    def to_dict(self):
        return {"kind": "deterministic"}


@dataclass(frozen=True)
class PolyRegression(ConditionalEstimator):
    """Least-squares projection on Hermite polynomials of ``W(t) / sqrt(t)``.

    At ``t = 0`` the sigma-algebra is trivial and the estimate is the
    sample mean.
    """

    degree: int = 2

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree!r}")

    def _basis(self, w, t, n):
        if w is None or t <= 0 or self.degree == 0:
            return np.ones((n, 1))
        x = np.asarray(w, dtype=float) / math.sqrt(t)
        basis = np.empty((n, self.degree + 1))
        basis[:, 0] = 1.0
        basis[:, 1] = x
        # He_{k+1} = x He_k - k He_{k-1}
        for k in range(1, self.degree):
            basis[:, k + 1] = x * basis[:, k] - k * basis[:, k - 1]
        return basis

    def expect(self, target, w=None, t=0.0):
        target = np.asarray(target, dtype=float)
        n = target.shape[0]
        basis = self._basis(w, t, n)
        if basis.shape[1] == 1:
            return np.broadcast_to(target.mean(axis=0), target.shape).copy()
        gram = basis.T @ basis
        eig = np.linalg.eigvalsh(gram)
        if not eig[0] > _RANK_RTOL * eig[-1]:
            rank = int(np.sum(eig > _RANK_RTOL * eig[-1]))
            raise RegressionSingular(
                f"rank {rank} < {basis.shape[1]} basis functions at t={t:.6g} "
                f"with {n} paths; lower the degree or add paths"
            )
        return basis @ np.linalg.solve(gram, basis.T @ target)

    def expect_pair(self, target, dw, w=None, t=0.0):
        target = np.asarray(target, dtype=float)
        both = self.expect(np.column_stack([target, target * dw]), w, t)
        return both[:, 0], both[:, 1]

    def expect_columns(self, targets, w=None, times=None):
        """:meth:`expect` for column ``j`` of ``targets`` given ``w[:, j]`` at ``times[j]``.

        All columns are regressed in one batched solve.
        """
        targets = np.asarray(targets, dtype=float)
        n, k = targets.shape
        out = np.empty_like(targets)
        if k == 0:
            return out
        times = np.zeros(k) if times is None else np.asarray(times, dtype=float)
        flat = (times <= 0) if w is not None and self.degree > 0 else np.ones(k, dtype=bool)
        out[:, flat] = targets[:, flat].mean(axis=0)
        cols = np.flatnonzero(~flat)
        if cols.size == 0:
            return out
        x = (np.asarray(w, dtype=float)[:, cols] / np.sqrt(times[cols])).T
        basis = np.empty((cols.size, n, self.degree + 1))
        basis[..., 0] = 1.0
        basis[..., 1] = x
        for d in range(1, self.degree):
            basis[..., d + 1] = x * basis[..., d] - d * basis[..., d - 1]
        gram = np.einsum("knp,knq->kpq", basis, basis)
        eig = np.linalg.eigvalsh(gram)
        bad = ~(eig[:, 0] > _RANK_RTOL * eig[:, -1])
        if np.any(bad):
            j = int(np.argmax(bad))
            rank = int(np.sum(eig[j] > _RANK_RTOL * eig[j, -1]))
            raise RegressionSingular(
                f"rank {rank} < {self.degree + 1} basis functions at t={times[cols[j]]:.6g} "
                f"with {n} paths; lower the degree or add paths"
            )
        rhs = np.einsum("knp,nk->kp", basis, targets[:, cols])
        coef = np.linalg.solve(gram, rhs[..., None])[..., 0]
        out[:, cols] = np.einsum("knp,kp->nk", basis, coef)
        return out

    def to_dict(self):
        return {"kind": "poly", "degree": self.degree}


@dataclass(frozen=True)
class NestedMC(ConditionalEstimator):
    """Local averaging over ``inner_paths`` neighbours in ``W(t)``.

    Paths are sorted by ``W(t)`` and split into consecutive bins of
    ``inner_paths``; each path receives the average of its bin.
    """

    inner_paths: int = 32

    def __post_init__(self):
        if self.inner_paths < 1:
            raise ValueError(f"inner_paths must be >= 1, got {self.inner_paths!r}")

    def expect(self, target, w=None, t=0.0):
        target = np.asarray(target, dtype=float)
        n = target.shape[0]
        if w is None or t <= 0:
            return np.full(n, target.mean())
        order = np.argsort(w, kind="stable")
        bins = np.arange(n) // self.inner_paths
        # fold a short trailing bin into its neighbour
        if n > self.inner_paths and n % self.inner_paths:
            bins[bins == bins[-1]] = bins[-1] - 1
        sums = np.bincount(bins, weights=target[order])
        counts = np.bincount(bins)
        out = np.empty(n)
        out[order] = (sums / counts)[bins]
        return out

    def to_dict(self):
        return {"kind": "nested", "inner_paths": self.inner_paths}


def estimator_from_dict(d: dict) -> ConditionalEstimator:
    kind = d.get("kind", "deterministic")
    if kind == "deterministic":
        return Deterministic()
    if kind == "poly":
        return PolyRegression(int(d.get("degree", 2)))
    if kind == "nested":
        return NestedMC(int(d.get("inner_paths", 32)))
    raise ValueError(f"unknown estimator kind {kind!r}")
