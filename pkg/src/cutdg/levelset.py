"""Level-set fields: scalar sign fields separating the two species.

Sign convention: phi < 0 marks species NEG, phi > 0 marks species POS,
phi = 0 is the interface.  The interface normal grad(phi)/|grad(phi)|
points from the negative into the positive species.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import InvalidConfigError

Evaluator = Callable[[np.ndarray], np.ndarray]


class LevelSet:
    """Scalar field with vectorized evaluation and a gradient.

    ``phi`` maps points of shape (N, D) to values of shape (N,).  If no
    analytic gradient is supplied, central differences with step
    ``fd_step`` are used.
    """

    def __init__(
        self,
        phi: Evaluator,
        grad: Optional[Evaluator] = None,
        fd_step: float = 1e-6,
    ):
        self._phi = phi
        self._grad = grad
        self.fd_step = fd_step

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.asarray(self._phi(points), dtype=float).reshape(len(points))

    def gradient(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self._grad is not None:
            g = np.asarray(self._grad(points), dtype=float)
            return g.reshape(points.shape)
        h = self.fd_step
        grad = np.empty_like(points)
        for a in range(points.shape[1]):
            plus = points.copy()
            minus = points.copy()
            plus[:, a] += h
            minus[:, a] -= h
            grad[:, a] = (self(plus) - self(minus)) / (2 * h)
        return grad

    def unit_normal(self, points: np.ndarray) -> np.ndarray:
        """grad(phi)/|grad(phi)|, pointing from NEG into POS."""
        g = self.gradient(points)
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return g / norms


def sphere(center, radius: float) -> LevelSet:
    """phi = |x - c|^2 - r^2 (negative inside the sphere)."""
    c = np.asarray(center, dtype=float)
    r2 = float(radius) ** 2

    def phi(pts):
        d = pts - c
        return np.einsum("ij,ij->i", d, d) - r2

    def grad(pts):
        return 2.0 * (pts - c)

    return LevelSet(phi, grad)


def plane(normal, offset: float) -> LevelSet:
    """phi = n.x - offset (negative on the back side of the plane)."""
    n = np.asarray(normal, dtype=float)

    def phi(pts):
        return pts @ n - offset

    def grad(pts):
        return np.broadcast_to(n, pts.shape).copy()

    return LevelSet(phi, grad)


def benchmark_surface() -> LevelSet:
    """The built-in 3D benchmark interface phi = x^2 + y^2 + z^3 - 0.49."""

    def phi(pts):
        return pts[:, 0] ** 2 + pts[:, 1] ** 2 + pts[:, 2] ** 3 - 0.49

    def grad(pts):
        g = np.empty_like(pts)
        g[:, 0] = 2 * pts[:, 0]
        g[:, 1] = 2 * pts[:, 1]
        g[:, 2] = 3 * pts[:, 2] ** 2
        return g

    return LevelSet(phi, grad)


def make_level_set(name: str, params: Optional[dict] = None) -> LevelSet:
    """Construct a named level set.

    Names: "sphere" (center, radius), "plane" (normal, offset),
    "paper-benchmark" (alias "benchmark"): the built-in 3D benchmark
    surface.
    """
    params = dict(params or {})
    if name == "sphere":
        center = params.get("center", (0.0, 0.0, 0.0))
        radius = params.get("radius", 0.7)
        return sphere(center, radius)
    if name == "plane":
        normal = params.get("normal", (1.0, 0.0, 0.0))
        offset = params.get("offset", 0.0)
        return plane(normal, offset)
    if name in ("paper-benchmark", "benchmark"):
        return benchmark_surface()
    raise InvalidConfigError(f"unknown level set name: {name!r}")
