"""Cell agglomeration on the cut-cell mesh.

Two sources of aggregation edges exist: the small-cut-cell map (pieces
with volume fraction below the threshold merge into their largest
same-species face neighbor, chains resolving transitively) and background
aggregation maps lifted to the cut-cell mesh by per-species duplication.
Edges never join different species.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cutcells import CutCellMesh
from .errors import IsolatedSmallCellError
from .mesh import AggregationMap, mesh_graph
from .quadrature import NEG, POS, SPECIES

Piece = tuple[int, int]  # (background cell, species)


@dataclass(frozen=True)
class CutAggregationMap:
    """Edges between same-species pieces of a cut-cell mesh."""

    pieces: tuple[Piece, ...]
    edges: frozenset  # of frozenset-like sorted piece pairs


def _present_pieces(cutmesh: CutCellMesh) -> tuple[Piece, ...]:
    return tuple(
        (j, s)
        for j in range(cutmesh.num_cells)
        for s in SPECIES
        if cutmesh.present(j, s)
    )


def small_cell_agglomeration_map(
    cutmesh: CutCellMesh, alpha: float
) -> CutAggregationMap:
    """Merge every piece with volume fraction in (0, alpha] into its
    largest same-species face neighbor (ties to the smaller cell index)."""
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    pieces = _present_pieces(cutmesh)
    graph = mesh_graph(cutmesh.mesh)
    edges = set()
    if alpha > 0:
        for j, s in pieces:
            frac = cutmesh.fraction(j, s)
            if not 0 < frac <= alpha:
                continue
            candidates = [
                l
                for l in graph.adjacency[j]
                if cutmesh.species_volume[l, s] > 0
            ]
            if not candidates:
                raise IsolatedSmallCellError(
                    f"cell {j} species {s} (fraction {frac:.4g}) has no "
                    "same-species face neighbor"
                )
            volumes = np.array(
                [cutmesh.species_volume[l, s] for l in candidates]
            )
            best = candidates[
                min(
                    range(len(candidates)),
                    key=lambda i: (-volumes[i], candidates[i]),
                )
            ]
            edges.add(tuple(sorted(((j, s), (best, s)))))
    return CutAggregationMap(pieces=pieces, edges=frozenset(edges))


def lift_aggregation_to_cutcells(
    background_map: AggregationMap, cutmesh: CutCellMesh
) -> CutAggregationMap:
    """Duplicate each background edge once per species present on both of
    its cells; never connects across the interface."""
    pieces = _present_pieces(cutmesh)
    edges = set()
    for a, b in background_map.edges:
        for s in SPECIES:
            if (
                cutmesh.species_volume[a, s] > 0
                and cutmesh.species_volume[b, s] > 0
            ):
                edges.add(tuple(sorted(((a, s), (b, s)))))
    return CutAggregationMap(pieces=pieces, edges=frozenset(edges))


def union_maps(*maps: CutAggregationMap) -> CutAggregationMap:
    pieces = maps[0].pieces
    edges = frozenset().union(*(m.edges for m in maps))
    return CutAggregationMap(pieces=pieces, edges=edges)


def cut_aggregates(cut_map: CutAggregationMap) -> list[list[Piece]]:
    """Connected components over pieces; untouched pieces are singletons.
    Sorted by representative (minimum piece), each component sorted."""
    index = {p: i for i, p in enumerate(cut_map.pieces)}
    parent = list(range(len(cut_map.pieces)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for pa, pb in sorted(cut_map.edges):
        ra, rb = find(index[pa]), find(index[pb])
        if ra != rb:
            if ra > rb:
                ra, rb = rb, ra
            parent[rb] = ra
    groups: dict[int, list[Piece]] = {}
    for p, i in index.items():
        groups.setdefault(find(i), []).append(p)
    return [sorted(groups[r]) for r in sorted(groups)]


def aggregate_volume_fractions(
    cutmesh: CutCellMesh, aggregates: list[list[Piece]]
) -> np.ndarray:
    """Species volume of each aggregate relative to the background volume
    of its cells."""
    fractions = np.empty(len(aggregates))
    cell_volume = cutmesh.mesh.cell_volume
    for i, group in enumerate(aggregates):
        vol = sum(cutmesh.species_volume[j, s] for j, s in group)
        fractions[i] = vol / (len(group) * cell_volume)
    return fractions
