"""Orthonormal tensor-Legendre bases of total degree <= k on box cells.

Modes are ordered by ascending total degree (ties broken lexicographically
on the per-axis degree tuple), so the leading N_{k'} modes of a degree-k
basis are exactly the degree-k' basis for every k' <= k.  Mode 0 is the
normalized constant 1/sqrt(|K|).
"""

from __future__ import annotations

from functools import lru_cache
from math import comb

import numpy as np


@lru_cache(maxsize=None)
def multi_indices(degree: int, dim: int) -> tuple[tuple[int, ...], ...]:
    """All per-axis degree tuples with total degree <= ``degree``."""
    idx = [
        beta
        for beta in np.ndindex(*([degree + 1] * dim))
        if sum(beta) <= degree
    ]
    idx.sort(key=lambda beta: (sum(beta), beta))
    return tuple(tuple(int(b) for b in beta) for beta in idx)


def space_dimension(degree: int, dim: int) -> int:
    """N_k = binomial(k + D, D)."""
    return comb(degree + dim, dim)


def _legendre_all(t: np.ndarray, max_degree: int):
    """Values and t-derivatives of Legendre polynomials 0..max_degree."""
    n_pts = len(t)
    vals = np.empty((n_pts, max_degree + 1))
    ders = np.empty((n_pts, max_degree + 1))
    vals[:, 0] = 1.0
    ders[:, 0] = 0.0
    if max_degree >= 1:
        vals[:, 1] = t
        ders[:, 1] = 1.0
    for n in range(1, max_degree):
        vals[:, n + 1] = (
            (2 * n + 1) * t * vals[:, n] - n * vals[:, n - 1]
        ) / (n + 1)
        ders[:, n + 1] = ders[:, n - 1] + (2 * n + 1) * vals[:, n]
    return vals, ders


class ReferenceBasis:
    """Degree-k orthonormal basis, evaluated on arbitrary box cells."""

    def __init__(self, degree: int, dim: int):
        self.degree = degree
        self.dim = dim
        self.indices = multi_indices(degree, dim)
        self.size = len(self.indices)
        assert self.size == space_dimension(degree, dim)
        self._index_array = np.array(self.indices)

    def modes_up_to(self, degree: int) -> int:
        """Number of leading modes spanning total degree <= ``degree``."""
        return space_dimension(min(degree, self.degree), self.dim)

    def eval(self, lo, hi, points: np.ndarray) -> np.ndarray:
        """Basis values, shape (n_points, size)."""
        vals, _ = self._axis_tables(lo, hi, points)
        out = np.ones((len(points), self.size))
        for a in range(self.dim):
            out *= vals[a][:, self._index_array[:, a]]
        return out

    def eval_with_grad(self, lo, hi, points: np.ndarray):
        """Basis values and gradients, shapes (n, size) and (n, size, dim)."""
        vals, ders = self._axis_tables(lo, hi, points)
        n_pts = len(points)
        value = np.ones((n_pts, self.size))
        for a in range(self.dim):
            value *= vals[a][:, self._index_array[:, a]]
        grad = np.empty((n_pts, self.size, self.dim))
        for g in range(self.dim):
            comp = np.ones((n_pts, self.size))
            for a in range(self.dim):
                table = ders[a] if a == g else vals[a]
                comp *= table[:, self._index_array[:, a]]
            grad[:, :, g] = comp
        return value, grad

    def _axis_tables(self, lo, hi, points: np.ndarray):
        points = np.asarray(points, dtype=float)
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        vals = []
        ders = []
        for a in range(self.dim):
            width = hi[a] - lo[a]
            t = (2.0 * points[:, a] - lo[a] - hi[a]) / width
            v, d = _legendre_all(t, self.degree)
            norm = np.sqrt((2 * np.arange(self.degree + 1) + 1) / width)
            vals.append(v * norm)
            ders.append(d * norm * (2.0 / width))
        return vals, ders
