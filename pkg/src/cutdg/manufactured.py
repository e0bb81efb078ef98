"""Manufactured solutions with a coefficient jump across the interface.

Both cases satisfy the interface conditions exactly: the solution vanishes
on the interface (so its jump is zero for any coefficient pair) and the
flux mu * grad(u) is globally smooth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .assembly import BoundaryCondition, DIRICHLET, PoissonProblem
from .levelset import LevelSet, plane, sphere
from .quadrature import NEG


@dataclass(frozen=True)
class ManufacturedCase:
    """A level set, a problem whose data match an exact solution, and the
    species-aware exact evaluator (points, species) -> values."""

    name: str
    dim: int
    level_set: LevelSet
    problem: PoissonProblem
    exact: Callable[[np.ndarray, int], np.ndarray]


def _dirichlet_from_exact(
    exact: Callable[[np.ndarray, int], np.ndarray], dim: int
) -> dict:
    return {
        (axis, side): BoundaryCondition(DIRICHLET, exact)
        for axis in range(dim)
        for side in (0, 1)
    }


def planar_jump_3d(
    mu_a: float = 1.0, mu_b: float = 1000.0, offset: float = 0.3
) -> ManufacturedCase:
    """Interface plane x = offset; u = sin(pi (x - offset)) cos(y) cos(z)
    divided by the species coefficient, so u vanishes on the interface and
    mu * grad(u) is smooth across it."""

    def q(p: np.ndarray) -> np.ndarray:
        return (
            np.sin(np.pi * (p[:, 0] - offset))
            * np.cos(p[:, 1])
            * np.cos(p[:, 2])
        )

    def exact(p: np.ndarray, species: int) -> np.ndarray:
        mu = mu_a if species == NEG else mu_b
        return q(p) / mu

    def source(p: np.ndarray) -> np.ndarray:
        return (np.pi**2 + 2.0) * q(p)

    problem = PoissonProblem(
        mu_a=mu_a,
        mu_b=mu_b,
        source=source,
        boundary=_dirichlet_from_exact(exact, 3),
    )
    return ManufacturedCase(
        name="planar-jump-3d",
        dim=3,
        level_set=plane((1.0, 0.0, 0.0), offset),
        problem=problem,
        exact=exact,
    )


def spherical_jump_2d(
    mu_a: float = 1.0, mu_b: float = 1000.0, radius: float = 0.7
) -> ManufacturedCase:
    """Circular interface of the given radius; u = (r^2 - radius^2) divided
    by the species coefficient, with the constant source f = -4."""

    r2 = radius * radius

    def exact(p: np.ndarray, species: int) -> np.ndarray:
        mu = mu_a if species == NEG else mu_b
        return (np.sum(p * p, axis=1) - r2) / mu

    def source(p: np.ndarray) -> np.ndarray:
        return np.full(len(p), -4.0)

    problem = PoissonProblem(
        mu_a=mu_a,
        mu_b=mu_b,
        source=source,
        boundary=_dirichlet_from_exact(exact, 2),
    )
    return ManufacturedCase(
        name="spherical-jump-2d",
        dim=2,
        level_set=sphere((0.0, 0.0), radius),
        problem=problem,
        exact=exact,
    )
