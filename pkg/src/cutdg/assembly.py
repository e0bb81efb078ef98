"""Symmetric interior penalty assembly for the two-phase Poisson problem.

The bilinear form couples piece-local bases through three face-type terms
(interior faces within one species, the embedded interface between the two
species, and Dirichlet domain-boundary faces) plus the volume diffusion
term.  The penalty coefficient scales like k^2 divided by a
volume-to-surface length of the agglomerated cut cell.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .agglomeration import CutAggregationMap, cut_aggregates
from .blockmatrix import BlockSparseMatrix, uniform_layout
from .cutcells import CutCellMesh, quad_cut_face, quad_volume
from .errors import (
    DimensionMismatchError,
    InvalidConfigError,
    MissingInterfaceError,
    MissingSpeciesError,
)
from .quadrature import NEG, POS, SPECIES
from .spaces import SpeciesOrthoBlocks, XdgIndexMap, evaluate_species_basis

DIRICHLET = "dirichlet"
NEUMANN = "neumann"


@dataclass(frozen=True)
class BoundaryCondition:
    """One condition on a domain-boundary plane: its kind and the boundary
    data evaluator g(points) -> values."""

    kind: str
    value: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.kind not in (DIRICHLET, NEUMANN):
            raise InvalidConfigError(f"unknown boundary kind {self.kind!r}")


def _zero(points: np.ndarray) -> np.ndarray:
    return np.zeros(len(points))


def _one(points: np.ndarray) -> np.ndarray:
    return np.ones(len(points))


@dataclass(frozen=True)
class PoissonProblem:
    """Diffusion coefficients per species (mu_a on the negative side of the
    level set, mu_b on the positive side), source evaluator, and one
    boundary condition per domain-boundary plane keyed by (axis, side)
    with side 0 = lower, 1 = upper."""

    mu_a: float
    mu_b: float
    source: Callable[[np.ndarray], np.ndarray]
    boundary: Mapping[tuple[int, int], BoundaryCondition]

    def __post_init__(self):
        if not (self.mu_a > 0 and self.mu_b > 0):
            raise InvalidConfigError(
                f"diffusion coefficients must be positive, got "
                f"{self.mu_a}, {self.mu_b}"
            )

    def mu(self, species: int) -> float:
        return self.mu_a if species == NEG else self.mu_b

    @property
    def mu_max(self) -> float:
        return max(self.mu_a, self.mu_b)

    def condition(self, axis: int, side: int) -> BoundaryCondition:
        key = (axis, side)
        if key not in self.boundary:
            raise InvalidConfigError(
                f"no boundary condition for domain face {key}"
            )
        return self.boundary[key]


def dirichlet_problem(
    mu_a: float,
    mu_b: float,
    source: Callable[[np.ndarray], np.ndarray],
    dim: int,
    g: Callable[[np.ndarray], np.ndarray] = _zero,
) -> PoissonProblem:
    """Problem with the same Dirichlet data on every domain-boundary
    plane."""
    boundary = {
        (axis, side): BoundaryCondition(DIRICHLET, g)
        for axis in range(dim)
        for side in (0, 1)
    }
    return PoissonProblem(mu_a=mu_a, mu_b=mu_b, source=source, boundary=boundary)


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty strength c_eta * k^2 / h' with h' the volume-to-surface
    length scale of the agglomerated cut cell."""

    c_eta: float = 4.0
    length_scale_rule: str = "volume-to-surface"

    def __post_init__(self):
        if not self.c_eta > 0:
            raise InvalidConfigError(f"c_eta must be positive, got {self.c_eta}")
        if self.length_scale_rule != "volume-to-surface":
            raise InvalidConfigError(
                f"unknown length-scale rule {self.length_scale_rule!r}"
            )


def _empty_agg_map(cutmesh: CutCellMesh) -> CutAggregationMap:
    pieces = tuple(
        (j, s)
        for j in range(cutmesh.num_cells)
        for s in SPECIES
        if cutmesh.present(j, s)
    )
    return CutAggregationMap(pieces=pieces, edges=frozenset())


class PenaltyScales:
    """Reciprocal length scales 1/h' per agglomerated cut cell, with
    h' = D * volume / surface; the surface of an aggregate counts outer
    face portions plus all member interface area."""

    def __init__(self, cutmesh: CutCellMesh, agg_map: Optional[CutAggregationMap]):
        if agg_map is None:
            agg_map = _empty_agg_map(cutmesh)
        self.cutmesh = cutmesh
        groups = cut_aggregates(agg_map)
        piece_to_group: dict = {}
        for g, pieces in enumerate(groups):
            for p in pieces:
                piece_to_group[p] = g
        cell_faces: dict = {}
        for fid, face in enumerate(cutmesh.faces):
            for c in face.cells():
                cell_faces.setdefault(c, []).append(fid)
        dim = cutmesh.mesh.dim
        inv = np.empty(len(groups))
        for g, pieces in enumerate(groups):
            volume = 0.0
            area = 0.0
            members = set(pieces)
            for j, s in pieces:
                volume += cutmesh.species_volume[j, s]
                area += cutmesh.interface_measure(j)
                for fid in cell_faces[j]:
                    face = cutmesh.faces[fid]
                    other = face.plus if face.minus == j else face.minus
                    if other is None or (other, s) not in members:
                        area += cutmesh.face_species_measure[fid, s]
            inv[g] = area / (dim * volume)
        self._piece_to_group = piece_to_group
        self._inv = inv

    def inv_h(self, piece: tuple[int, int]) -> float:
        if piece not in self._piece_to_group:
            raise MissingSpeciesError(
                f"species {piece[1]} has no volume in cell {piece[0]}"
            )
        return float(self._inv[self._piece_to_group[piece]])


def penalty_eta(
    face_or_interface,
    k: int,
    cutmesh: CutCellMesh,
    agg_map: Optional[CutAggregationMap],
    config: PenaltyConfig = PenaltyConfig(),
) -> float:
    """Penalty coefficient for one face portion ("face", face_id, species)
    or one cell's interface ("interface", cell)."""
    scales = PenaltyScales(cutmesh, agg_map)
    kind = face_or_interface[0]
    if kind == "face":
        _, fid, species = face_or_interface
        face = cutmesh.faces[fid]
        pieces = [(c, species) for c in face.cells() if cutmesh.present(c, species)]
        if not pieces:
            raise MissingSpeciesError(
                f"species {species} absent on both sides of face {fid}"
            )
    elif kind == "interface":
        _, j = face_or_interface
        if cutmesh.interface_measure(j) == 0.0:
            raise MissingInterfaceError(f"cell {j} has no interface")
        pieces = [(j, NEG), (j, POS)]
    else:
        raise InvalidConfigError(f"unknown penalty target {kind!r}")
    return config.c_eta * k * k * max(scales.inv_h(p) for p in pieces)


def _check_map(cutmesh: CutCellMesh, indexmap: XdgIndexMap) -> None:
    if indexmap.cutmesh is not cutmesh:
        expected = [
            (j, s)
            for j in range(cutmesh.num_cells)
            for s in SPECIES
            if cutmesh.present(j, s)
        ]
        if list(indexmap.blocks) != expected:
            raise DimensionMismatchError(
                "index map blocks do not match the cut-cell mesh"
            )


def _degree(indexmap: XdgIndexMap) -> int:
    return max(indexmap.modes.degrees)


def _boundary_values(
    bc: BoundaryCondition, points: np.ndarray, species: int
) -> np.ndarray:
    """Boundary data, passing the species to evaluators that accept it
    (data may differ per species where the interface meets the boundary)."""
    try:
        g = bc.value(points, species)
    except TypeError:
        g = bc.value(points)
    return np.asarray(g, dtype=float)


def _pair_terms(weights, eta, mu_pen, sides):
    """Dense blocks of the two consistency terms and the penalty term for
    one face portion; `sides` entries are (vals, mu_grad_normal, jump_sign)
    and the mean carries the given per-side factor."""
    n = len(sides)
    mean = 1.0 if n == 1 else 0.5
    out = {}
    for a, (Va, Gna, sa) in enumerate(sides):
        Wa = Va * weights[:, None]
        for b, (Vb, Gnb, sb) in enumerate(sides):
            block = (
                -mean * sa * Wa.T @ Gnb
                - mean * sb * (Gna * weights[:, None]).T @ Vb
                + eta * mu_pen * sa * sb * Wa.T @ Vb
            )
            out[(a, b)] = block
    return out


def assemble_sip(
    cutmesh: CutCellMesh,
    indexmap: XdgIndexMap,
    orthoblocks: SpeciesOrthoBlocks,
    problem: PoissonProblem,
    penalty: PenaltyConfig = PenaltyConfig(),
    agg_map: Optional[CutAggregationMap] = None,
) -> BlockSparseMatrix:
    """System matrix of the symmetric interior penalty form: volume
    diffusion, interior-face and interface consistency/symmetry terms, and
    penalty terms on everything but Neumann boundary portions."""
    _check_map(cutmesh, indexmap)
    k = _degree(indexmap)
    scales = PenaltyScales(cutmesh, agg_map)
    c = penalty.c_eta
    size = indexmap.block_size
    n_blocks = indexmap.num_blocks
    M = BlockSparseMatrix(
        uniform_layout(n_blocks, size), uniform_layout(n_blocks, size)
    )

    # volume diffusion
    for b, (j, s) in enumerate(indexmap.blocks):
        rule = quad_volume(cutmesh, j, s)
        _, grads = evaluate_species_basis(
            cutmesh, orthoblocks, j, s, rule.nodes, with_grad=True
        )
        M.add_block(
            b, b, problem.mu(s) * np.einsum("p,pid,pld->il", rule.weights, grads, grads)
        )

    # interior faces and Dirichlet boundary portions
    for fid, face in enumerate(cutmesh.faces):
        axis = face.axis
        if face.is_boundary:
            side = 0 if face.minus is None else 1
            j = face.plus if face.minus is None else face.minus
            if problem.condition(axis, side).kind == NEUMANN:
                continue
            sign = -1.0 if side == 0 else 1.0  # outward normal component
            for s in SPECIES:
                if cutmesh.face_species_measure[fid, s] == 0.0:
                    continue
                if not cutmesh.present(j, s):
                    continue
                rule = quad_cut_face(cutmesh, fid, s)
                if len(rule.weights) == 0:
                    continue
                mu = problem.mu(s)
                eta = c * k * k * scales.inv_h((j, s))
                V, G = evaluate_species_basis(
                    cutmesh, orthoblocks, j, s, rule.nodes, with_grad=True
                )
                blocks = _pair_terms(
                    rule.weights, eta, mu, [(V, mu * sign * G[:, :, axis], 1.0)]
                )
                b = indexmap.block_of(j, s)
                M.add_block(b, b, blocks[(0, 0)])
        else:
            jm, jp = face.minus, face.plus
            for s in SPECIES:
                if cutmesh.face_species_measure[fid, s] == 0.0:
                    continue
                if not (cutmesh.present(jm, s) and cutmesh.present(jp, s)):
                    continue
                rule = quad_cut_face(cutmesh, fid, s)
                if len(rule.weights) == 0:
                    continue
                mu = problem.mu(s)
                eta = c * k * k * max(
                    scales.inv_h((jm, s)), scales.inv_h((jp, s))
                )
                Vm, Gm = evaluate_species_basis(
                    cutmesh, orthoblocks, jm, s, rule.nodes, with_grad=True
                )
                Vp, Gp = evaluate_species_basis(
                    cutmesh, orthoblocks, jp, s, rule.nodes, with_grad=True
                )
                # normal along +axis: the jump takes the trace on the
                # side the normal leaves, minus the trace it points into
                sides = [
                    (Vm, mu * Gm[:, :, axis], 1.0),
                    (Vp, mu * Gp[:, :, axis], -1.0),
                ]
                blocks = _pair_terms(rule.weights, eta, mu, sides)
                ids = [indexmap.block_of(jm, s), indexmap.block_of(jp, s)]
                for (a, b), block in blocks.items():
                    M.add_block(ids[a], ids[b], block)

    # interface terms
    for j, rule in sorted(cutmesh.interface_rules.items()):
        if len(rule.weights) == 0:
            continue
        eta = c * k * k * max(scales.inv_h((j, NEG)), scales.inv_h((j, POS)))
        Vn, Gn_ = evaluate_species_basis(
            cutmesh, orthoblocks, j, NEG, rule.nodes, with_grad=True
        )
        Vp, Gp_ = evaluate_species_basis(
            cutmesh, orthoblocks, j, POS, rule.nodes, with_grad=True
        )
        nrm = rule.normals
        # normal points from the negative to the positive side; the jump
        # is negative-side trace minus positive-side trace
        sides = [
            (Vn, problem.mu(NEG) * np.einsum("pid,pd->pi", Gn_, nrm), 1.0),
            (Vp, problem.mu(POS) * np.einsum("pid,pd->pi", Gp_, nrm), -1.0),
        ]
        blocks = _pair_terms(rule.weights, eta, problem.mu_max, sides)
        ids = [indexmap.block_of(j, NEG), indexmap.block_of(j, POS)]
        for (a, b), block in blocks.items():
            M.add_block(ids[a], ids[b], block)

    return M


def assemble_rhs(
    cutmesh: CutCellMesh,
    indexmap: XdgIndexMap,
    orthoblocks: SpeciesOrthoBlocks,
    problem: PoissonProblem,
    penalty: PenaltyConfig = PenaltyConfig(),
    agg_map: Optional[CutAggregationMap] = None,
) -> np.ndarray:
    """Load vector: volume source, Dirichlet consistency and penalty
    terms, and Neumann flux terms."""
    _check_map(cutmesh, indexmap)
    k = _degree(indexmap)
    scales = PenaltyScales(cutmesh, agg_map)
    c = penalty.c_eta
    rhs = np.zeros(indexmap.L)

    for b, (j, s) in enumerate(indexmap.blocks):
        rule = quad_volume(cutmesh, j, s)
        V = evaluate_species_basis(cutmesh, orthoblocks, j, s, rule.nodes)
        rhs[indexmap.block_slice(b)] += V.T @ (
            rule.weights * problem.source(rule.nodes)
        )

    for fid, face in enumerate(cutmesh.faces):
        if not face.is_boundary:
            continue
        axis = face.axis
        side = 0 if face.minus is None else 1
        j = face.plus if face.minus is None else face.minus
        bc = problem.condition(axis, side)
        sign = -1.0 if side == 0 else 1.0
        for s in SPECIES:
            if cutmesh.face_species_measure[fid, s] == 0.0:
                continue
            if not cutmesh.present(j, s):
                continue
            rule = quad_cut_face(cutmesh, fid, s)
            if len(rule.weights) == 0:
                continue
            mu = problem.mu(s)
            g = _boundary_values(bc, rule.nodes, s)
            sl = indexmap.block_slice(indexmap.block_of(j, s))
            if bc.kind == NEUMANN:
                V = evaluate_species_basis(cutmesh, orthoblocks, j, s, rule.nodes)
                rhs[sl] += V.T @ (rule.weights * mu * g)
            else:
                eta = c * k * k * scales.inv_h((j, s))
                V, G = evaluate_species_basis(
                    cutmesh, orthoblocks, j, s, rule.nodes, with_grad=True
                )
                Gn = sign * G[:, :, axis]
                rhs[sl] += (eta * V - Gn).T @ (rule.weights * mu * g)
    return rhs


def l2_error(
    solution_vector: np.ndarray,
    exact_evaluator: Callable[[np.ndarray, int], np.ndarray],
    cutmesh: CutCellMesh,
    indexmap: XdgIndexMap,
    orthoblocks: SpeciesOrthoBlocks,
) -> float:
    """Broken L2 distance between a coefficient vector and a species-aware
    exact evaluator (points, species) -> values."""
    u = np.asarray(solution_vector, dtype=float)
    if u.shape != (indexmap.L,):
        raise DimensionMismatchError(
            f"solution has shape {u.shape}, expected ({indexmap.L},)"
        )
    total = 0.0
    for b, (j, s) in enumerate(indexmap.blocks):
        rule = quad_volume(cutmesh, j, s)
        V = evaluate_species_basis(cutmesh, orthoblocks, j, s, rule.nodes)
        diff = V @ u[indexmap.block_slice(b)] - np.asarray(
            exact_evaluator(rule.nodes, s), dtype=float
        )
        total += float(rule.weights @ diff**2)
    return float(np.sqrt(total))
