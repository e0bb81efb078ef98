"""Aggregation coarse spaces and level transfer.

Each aggregate (a connected, single-species set of cut-cell pieces) carries
an orthonormal basis of total-degree-k polynomials on its region.  The basis
starts from monomials on the aggregate's bounding box, orthonormalized
against the aggregate mass matrix accumulated from the stored piece
quadrature rules, and is stored as exact polynomial coefficients in the
plain per-cell background basis ("carrier").  Because every quantity is
defined through the same stored rules, transfer matrices between aggregate
levels have orthonormal columns to roundoff.

The raw cut-cell space itself is represented in the plain background basis
(no per-piece re-orthonormalization): sliver pieces destined for
agglomeration can have numerically singular local mass matrices, so the
orthonormalization lives on the aggregates, where the small-cell threshold
guarantees well-conditioned Gram matrices.  The raw system is only ever
solved through its restriction to the first aggregate level.
"""

from __future__ import annotations

from dataclasses import dataclass
from time import perf_counter
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .agglomeration import (
    CutAggregationMap,
    cut_aggregates,
    lift_aggregation_to_cutcells,
    small_cell_agglomeration_map,
    union_maps,
)
from .basis import ReferenceBasis, multi_indices
from .blockmatrix import (
    BlockSparseMatrix,
    bs_matmat,
    uniform_layout,
)
from .cutcells import CutCellMesh, quad_volume
from .errors import (
    DegenerateAggregateError,
    DimensionMismatchError,
    InvalidMapError,
)
from .mesh import MeshGraph, build_multigrid_aggregation_sequence, mesh_graph
from .quadrature import tensor_rule
from .spaces import XdgIndexMap

Piece = tuple[int, int]

GRAM_PIVOT_RTOL = 1e-13


@dataclass(frozen=True)
class LevelData:
    """One level of the aggregation hierarchy: its aggregates (sets of
    cut-cell pieces) and, per aggregate, the coefficients of its orthonormal
    polynomial basis in the plain per-cell background bases ("carrier",
    shape (num_pieces * block_size, block_size))."""

    cutmesh: CutCellMesh
    basis: ReferenceBasis
    aggregates: tuple[tuple[Piece, ...], ...]
    carriers: tuple[np.ndarray, ...]

    @property
    def num_blocks(self) -> int:
        return len(self.aggregates)

    @property
    def block_size(self) -> int:
        return self.basis.size

    @property
    def num_dofs(self) -> int:
        return self.num_blocks * self.block_size

    def piece_to_aggregate(self) -> dict:
        out: dict = {}
        for g, pieces in enumerate(self.aggregates):
            for p in pieces:
                out[p] = g
        return out

    def carrier_rows(self, g: int) -> dict:
        """Per-piece row slice into aggregate g's carrier."""
        size = self.block_size
        return {
            p: slice(i * size, (i + 1) * size)
            for i, p in enumerate(self.aggregates[g])
        }


@dataclass(frozen=True)
class RestrictionMatrix:
    """Fine-to-coarse transfer: `matrix` has one block column per coarse
    aggregate with orthonormal columns (matrix.T @ matrix = I); `coarse`
    describes the coarse level's aggregates and carriers."""

    matrix: BlockSparseMatrix
    coarse: LevelData


def _pieces_bounding_box(
    cutmesh: CutCellMesh, pieces: Sequence[Piece]
) -> tuple[np.ndarray, np.ndarray]:
    los, his = zip(*(cutmesh.mesh.cell_bounds(j) for j, _s in pieces))
    return np.min(np.array(los), axis=0), np.max(np.array(his), axis=0)


def _monomial_values(
    points: np.ndarray, lo: np.ndarray, hi: np.ndarray, dim: int, degree: int
) -> np.ndarray:
    """Monomials of the affinely mapped bounding-box coordinates, one column
    per multi-index in ascending total degree."""
    center = 0.5 * (lo + hi)
    halfwidth = 0.5 * (hi - lo)
    t = (points - center) / halfwidth
    exps = multi_indices(degree, dim)
    out = np.empty((len(points), len(exps)))
    for m, a in enumerate(exps):
        col = np.ones(len(points))
        for d, e in enumerate(a):
            if e:
                col *= t[:, d] ** e
        out[:, m] = col
    return out


def _chol_or_degenerate(G: np.ndarray, context: str) -> np.ndarray:
    n = len(G)
    L = np.zeros_like(G)
    threshold = GRAM_PIVOT_RTOL * float(np.max(np.diag(G)))
    for i in range(n):
        s = G[i, i] - L[i, :i] @ L[i, :i]
        if not s > threshold:
            raise DegenerateAggregateError(
                f"aggregate Gram pivot {s:.3e} below threshold "
                f"{threshold:.3e} ({context})"
            )
        L[i, i] = np.sqrt(s)
        if i + 1 < n:
            L[i + 1 :, i] = (G[i + 1 :, i] - L[i + 1 :, :i] @ L[i, :i]) / L[
                i, i
            ]
    return L


def _cell_monomial_coefficients(
    cutmesh: CutCellMesh,
    basis: ReferenceBasis,
    j: int,
    lo: np.ndarray,
    hi: np.ndarray,
) -> np.ndarray:
    """Exact coefficients of the bounding-box monomials in cell j's plain
    background basis, via full-cell Gauss quadrature (the background basis
    is orthonormal on the full cell, and the integrands are polynomials
    within the rule's exactness)."""
    clo, chi = cutmesh.mesh.cell_bounds(j)
    rule = tensor_rule(clo, chi, basis.degree + 1)
    vals = basis.eval(clo, chi, rule.nodes)
    mono = _monomial_values(rule.nodes, lo, hi, cutmesh.mesh.dim, basis.degree)
    return vals.T @ (mono * rule.weights[:, None])


def build_carrier(
    cutmesh: CutCellMesh,
    basis: ReferenceBasis,
    pieces: Sequence[Piece],
) -> np.ndarray:
    """Orthonormal degree-k polynomial basis on the union of `pieces`,
    as stacked coefficient blocks in the plain per-cell background bases.

    Starts from monomials on the aggregate bounding box (ascending total
    degree, so leading columns span the lower-degree subspaces), builds the
    aggregate Gram matrix from the stored piece quadrature rules, and
    orthonormalizes through a Cholesky factorization (twice, for
    conditioning; both passes are upper-triangular so the degree grading is
    preserved).  The per-cell coefficient blocks are exact polynomial
    changes of basis, independent of how thin any single piece is.
    """
    dim = cutmesh.mesh.dim
    degree = basis.degree
    lo, hi = _pieces_bounding_box(cutmesh, pieces)
    size = basis.size
    G = np.zeros((size, size))
    for j, s in pieces:
        rule = quad_volume(cutmesh, j, s)
        mono = _monomial_values(rule.nodes, lo, hi, dim, degree)
        G += mono.T @ (mono * rule.weights[:, None])
    context = f"pieces {tuple(pieces)}"
    L1 = _chol_or_degenerate(0.5 * (G + G.T), context)
    T = solve_triangular(L1, np.eye(size), lower=True).T
    G2 = T.T @ G @ T
    L2 = _chol_or_degenerate(0.5 * (G2 + G2.T), context)
    T = T @ solve_triangular(L2, np.eye(size), lower=True).T
    carrier = np.empty((len(pieces) * size, size))
    for i, (j, _s) in enumerate(pieces):
        B = _cell_monomial_coefficients(cutmesh, basis, j, lo, hi)
        carrier[i * size : (i + 1) * size] = B @ T
    return carrier


def aggregation_level_data(
    cutmesh: CutCellMesh,
    basis: ReferenceBasis,
    agg_map: CutAggregationMap,
) -> LevelData:
    """Aggregate level whose groups are the connected components of
    `agg_map` plus singletons for unaggregated pieces.

    Uncut singleton pieces keep the background basis (identity carrier,
    already orthonormal on the full cell); all other aggregates get
    orthonormalized bounding-box monomials.
    """
    groups = cut_aggregates(agg_map)
    eye = np.eye(basis.size)
    aggregates: list[tuple[Piece, ...]] = []
    carriers: list[np.ndarray] = []
    for group in groups:
        pieces = tuple(sorted(group))
        aggregates.append(pieces)
        if len(pieces) == 1 and pieces[0] not in cutmesh.cut_volume_rules:
            carriers.append(eye)
        else:
            carriers.append(build_carrier(cutmesh, basis, pieces))
    return LevelData(
        cutmesh=cutmesh,
        basis=basis,
        aggregates=tuple(aggregates),
        carriers=tuple(carriers),
    )


def initial_restriction(
    level: LevelData, index_map: XdgIndexMap
) -> BlockSparseMatrix:
    """Change of basis from an aggregate level to the raw cut-cell space in
    the plain background basis: block (piece, aggregate) holds the carrier
    rows of that piece.  Prolongation `R @ u` yields raw plain-basis
    coefficients; the transpose restricts residual functionals.  Columns
    are orthonormal in the piece-mass-weighted inner product rather than
    the Euclidean one, because the plain raw basis is not orthonormal on
    cut pieces."""
    if index_map.block_size != level.block_size:
        raise DimensionMismatchError(
            f"index map block size {index_map.block_size} != level block "
            f"size {level.block_size}"
        )
    matrix = BlockSparseMatrix(
        uniform_layout(index_map.num_blocks, level.block_size),
        uniform_layout(level.num_blocks, level.block_size),
    )
    for G in range(level.num_blocks):
        rows = level.carrier_rows(G)
        for p in level.aggregates[G]:
            matrix.add_block(
                index_map.block_of(*p), G, level.carriers[G][rows[p]]
            )
    return matrix


def _piece_plain_mass(
    cutmesh: CutCellMesh, basis: ReferenceBasis, piece: Piece
) -> Optional[np.ndarray]:
    """Mass matrix of the plain background basis on one piece, or None for
    the exact identity (uncut pieces)."""
    if piece not in cutmesh.cut_volume_rules:
        return None
    j, s = piece
    rule = quad_volume(cutmesh, j, s)
    lo, hi = cutmesh.mesh.cell_bounds(j)
    vals = basis.eval(lo, hi, rule.nodes)
    return vals.T @ (vals * rule.weights[:, None])


def build_restriction(
    fine_level_data: LevelData, coarse_map: CutAggregationMap
) -> RestrictionMatrix:
    """Transfer from a fine aggregate level to the coarse level whose
    aggregates are the connected components of `coarse_map`.

    Every coarse aggregate must be a union of fine aggregates (nesting);
    a coarse aggregate consisting of a single fine aggregate inherits its
    carrier and gets an identity block.  Blocks are L2 inner products of
    the two levels' basis functions, accumulated piece by piece with the
    same stored rules that orthonormalized the carriers, so the columns
    are orthonormal to roundoff.
    """
    fine = fine_level_data
    cutmesh, basis = fine.cutmesh, fine.basis
    size = fine.block_size
    p2f = fine.piece_to_aggregate()
    coarse_groups = cut_aggregates(coarse_map)

    fine_sizes = {g: len(pieces) for g, pieces in enumerate(fine.aggregates)}
    matrix = BlockSparseMatrix(
        uniform_layout(fine.num_blocks, size),
        uniform_layout(len(coarse_groups), size),
    )
    carriers: list[np.ndarray] = []
    aggregates: list[tuple[Piece, ...]] = []
    for G, group in enumerate(coarse_groups):
        pieces = tuple(sorted(group))
        members = sorted({p2f[p] for p in pieces})
        if sum(fine_sizes[g] for g in members) != len(pieces):
            raise InvalidMapError(
                "coarse aggregation map splits a fine aggregate "
                f"(coarse group {pieces})"
            )
        aggregates.append(pieces)
        if len(members) == 1:
            carriers.append(fine.carriers[members[0]])
            matrix.add_block(members[0], G, np.eye(size))
            continue
        carrier = build_carrier(cutmesh, basis, pieces)
        carriers.append(carrier)
        rows = {p: slice(i * size, (i + 1) * size) for i, p in enumerate(pieces)}
        for g in members:
            block = np.zeros((size, size))
            fine_rows = fine.carrier_rows(g)
            for p in fine.aggregates[g]:
                mass = _piece_plain_mass(cutmesh, basis, p)
                left = fine.carriers[g][fine_rows[p]]
                right = carrier[rows[p]]
                if mass is None:
                    block += left.T @ right
                else:
                    block += left.T @ mass @ right
            matrix.add_block(g, G, block)
    coarse = LevelData(
        cutmesh=cutmesh,
        basis=basis,
        aggregates=tuple(aggregates),
        carriers=tuple(carriers),
    )
    return RestrictionMatrix(matrix=matrix, coarse=coarse)


def galerkin_restrict(M, b, R) -> tuple:
    """Coarse system (R^T M R, R^T b)."""
    if isinstance(R, RestrictionMatrix):
        R = R.matrix
    Rt = R.transpose()
    Mc = bs_matmat(Rt, bs_matmat(M, R))
    bc = None if b is None else Rt.matvec(np.asarray(b, dtype=float))
    return Mc, bc


def evaluate_aggregate_function(
    level: LevelData, g: int, coeffs: np.ndarray, points: np.ndarray
) -> np.ndarray:
    """Pointwise values of an aggregate-space function on the pieces of
    aggregate g (points must lie in that aggregate's species region)."""
    carrier = level.carriers[g]
    rows = level.carrier_rows(g)
    mesh = level.cutmesh.mesh
    out = np.zeros(len(points))
    filled = np.zeros(len(points), dtype=bool)
    for p in level.aggregates[g]:
        j, _s = p
        lo, hi = mesh.cell_bounds(j)
        inside = np.all((points >= lo) & (points <= hi), axis=1) & ~filled
        if not np.any(inside):
            continue
        local = carrier[rows[p]] @ coeffs
        vals = level.basis.eval(lo, hi, points[inside])
        out[inside] = vals @ local
        filled[inside] = True
    return out


def aggregate_block_graph(level: LevelData, graph: MeshGraph) -> MeshGraph:
    """Adjacency between aggregates: two aggregates touch if they share a
    background cell (cross-species coupling) or any of their cells are
    face neighbors."""
    cell_to_aggs: dict = {}
    for g, pieces in enumerate(level.aggregates):
        for j, _s in pieces:
            cell_to_aggs.setdefault(j, set()).add(g)
    edges = set()
    for aggs in cell_to_aggs.values():
        row = sorted(aggs)
        for i, a in enumerate(row):
            for b in row[i + 1 :]:
                edges.add((a, b))
    for ja, jb in graph.edges:
        for a in cell_to_aggs.get(ja, ()):
            for b in cell_to_aggs.get(jb, ()):
                if a != b:
                    edges.add((min(a, b), max(a, b)))
    n = level.num_blocks
    adjacency: list[list[int]] = [[] for _ in range(n)]
    for a, b in sorted(edges):
        adjacency[a].append(b)
        adjacency[b].append(a)
    return MeshGraph(
        num_cells=n,
        edges=tuple(sorted(edges)),
        adjacency=tuple(tuple(sorted(nbrs)) for nbrs in adjacency),
    )


@dataclass
class HierarchyLevel:
    """One solver level: aggregates, Galerkin system, transfer to the next
    coarser level (None at the coarsest), and the aggregate adjacency
    graph used to partition the level for the Schwarz smoother."""

    data: LevelData
    matrix: BlockSparseMatrix
    rhs: Optional[np.ndarray]
    restriction: Optional[BlockSparseMatrix]
    graph: MeshGraph

    @property
    def num_dofs(self) -> int:
        return self.data.num_dofs


@dataclass
class MultigridHierarchy:
    """Levels 1..num_levels of the aggregation hierarchy.  Level 1 carries
    only the small-cell agglomeration; each further level unions it with
    background index blocks of doubling width.  `to_level1` maps level-1
    coefficients to raw cut-cell coefficients in the plain background
    basis."""

    levels: list
    to_level1: BlockSparseMatrix
    small_map: CutAggregationMap

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def level(self, lam: int) -> HierarchyLevel:
        if not 1 <= lam <= len(self.levels):
            raise DimensionMismatchError(f"no level {lam}")
        return self.levels[lam - 1]

    def summary_csv(self) -> str:
        lines = ["level,aggregates,dofs,nnz_blocks"]
        for i, lvl in enumerate(self.levels, start=1):
            lines.append(
                f"{i},{lvl.data.num_blocks},{lvl.num_dofs},"
                f"{lvl.matrix.num_nonzero_blocks}"
            )
        return "\n".join(lines) + "\n"


def build_hierarchy(
    cutmesh: CutCellMesh,
    basis: ReferenceBasis,
    index_map: XdgIndexMap,
    matrix: BlockSparseMatrix,
    rhs: Optional[np.ndarray],
    alpha: float,
    num_levels: int,
    phase_times: Optional[dict] = None,
) -> MultigridHierarchy:
    """Galerkin hierarchy over the raw system `matrix`, `rhs` assembled in
    the plain background basis.

    Level 1 merges only the small cut cells (fraction <= alpha); level l
    additionally merges background cells into axis blocks of width
    2**(l-1).  Systems are restricted level to level.

    When ``phase_times`` is given, the seconds spent constructing the
    aggregate bases ("basis") and forming the Galerkin products
    ("matmat") are accumulated into it.
    """
    times = phase_times if phase_times is not None else {}
    times.setdefault("basis", 0.0)
    times.setdefault("matmat", 0.0)

    small = small_cell_agglomeration_map(cutmesh, alpha)
    background = build_multigrid_aggregation_sequence(cutmesh.mesh, num_levels)
    graph = mesh_graph(cutmesh.mesh)

    t0 = perf_counter()
    level1 = aggregation_level_data(cutmesh, basis, small)
    R0 = initial_restriction(level1, index_map)
    times["basis"] += perf_counter() - t0
    t0 = perf_counter()
    M, b = galerkin_restrict(matrix, rhs, R0)
    times["matmat"] += perf_counter() - t0

    datas: list[LevelData] = [level1]
    systems: list[tuple[BlockSparseMatrix, Optional[np.ndarray]]] = [(M, b)]
    transfers: list[BlockSparseMatrix] = []
    fine = level1
    for bg in background[1:]:
        t0 = perf_counter()
        effective = union_maps(lift_aggregation_to_cutcells(bg, cutmesh), small)
        rest = build_restriction(fine, effective)
        times["basis"] += perf_counter() - t0
        t0 = perf_counter()
        M, b = galerkin_restrict(M, b, rest)
        times["matmat"] += perf_counter() - t0
        transfers.append(rest.matrix)
        datas.append(rest.coarse)
        systems.append((M, b))
        fine = rest.coarse

    levels = []
    for i, (data, (Mc, bc)) in enumerate(zip(datas, systems)):
        nxt = transfers[i] if i < len(transfers) else None
        levels.append(
            HierarchyLevel(
                data=data,
                matrix=Mc,
                rhs=bc,
                restriction=nxt,
                graph=aggregate_block_graph(data, graph),
            )
        )
    return MultigridHierarchy(levels=levels, to_level1=R0, small_map=small)
