"""Cartesian background meshes, face enumeration, the cell-adjacency graph,
and nested axis-block aggregation maps.

Cells are numbered lexicographically with the first axis fastest:
``j = i0 + n0*(i1 + n1*i2)``.  All indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidConfigError, InvalidDomainError, InvalidMapError


@dataclass(frozen=True)
class BackgroundMesh:
    """Axis-aligned Cartesian partition of a box domain."""

    dim: int
    box: tuple[tuple[float, float], ...]
    cells_per_axis: tuple[int, ...]

    @property
    def num_cells(self) -> int:
        n = 1
        for c in self.cells_per_axis:
            n *= c
        return n

    @property
    def widths(self) -> np.ndarray:
        return np.array(
            [(hi - lo) / n for (lo, hi), n in zip(self.box, self.cells_per_axis)]
        )

    @property
    def cell_volume(self) -> float:
        """Volume of one cell (all cells are congruent)."""
        return float(np.prod(self.widths))

    def multi_index(self, j: int) -> tuple[int, ...]:
        idx = []
        for n in self.cells_per_axis:
            idx.append(j % n)
            j //= n
        return tuple(idx)

    def flat_index(self, multi: Sequence[int]) -> int:
        j = 0
        for i, n in zip(reversed(multi), reversed(self.cells_per_axis)):
            j = j * n + i
        return j

    def cell_bounds(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        multi = self.multi_index(j)
        w = self.widths
        lo = np.array([self.box[a][0] + multi[a] * w[a] for a in range(self.dim)])
        return lo, lo + w

    def cell_center(self, j: int) -> np.ndarray:
        lo, hi = self.cell_bounds(j)
        return 0.5 * (lo + hi)


@dataclass(frozen=True)
class Face:
    """A (D-1)-dimensional mesh face.

    ``minus``/``plus`` are the adjacent cell indices on the lower/upper side
    along ``axis``; exactly one of them is None for a domain-boundary face.
    ``lo``/``hi`` bound the face as a degenerate box with
    ``lo[axis] == hi[axis]``.
    """

    axis: int
    minus: Optional[int]
    plus: Optional[int]
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @property
    def is_boundary(self) -> bool:
        return self.minus is None or self.plus is None

    @property
    def coordinate(self) -> float:
        return self.lo[self.axis]

    def cells(self) -> tuple[int, ...]:
        return tuple(c for c in (self.minus, self.plus) if c is not None)


@dataclass(frozen=True)
class MeshGraph:
    """Undirected face-adjacency graph of the background cells."""

    num_cells: int
    edges: tuple[tuple[int, int], ...]
    adjacency: tuple[tuple[int, ...], ...]

    def has_edge(self, a: int, b: int) -> bool:
        if a > b:
            a, b = b, a
        return (a, b) in self._edge_set

    @property
    def _edge_set(self) -> frozenset:
        # cached on first use
        cached = self.__dict__.get("_edge_set_cache")
        if cached is None:
            cached = frozenset(self.edges)
            object.__setattr__(self, "_edge_set_cache", cached)
        return cached


@dataclass(frozen=True)
class AggregationMap:
    """A subset of mesh-graph edges; aggregates are its connected components.

    Cells touched by no edge form singleton aggregates.
    """

    num_cells: int
    edges: frozenset


def build_cartesian(
    box: Sequence[Sequence[float]],
    cells_per_axis: Sequence[int],
    dim: Optional[int] = None,
) -> BackgroundMesh:
    """Build a Cartesian mesh of the given box.

    ``box`` is one (lo, hi) pair per axis.  Raises
    :class:`InvalidDomainError` for degenerate boxes or non-positive cell
    counts.
    """
    if dim is None:
        dim = len(box)
    if dim not in (2, 3):
        raise InvalidDomainError(f"dimension must be 2 or 3, got {dim}")
    if len(box) != dim or len(cells_per_axis) != dim:
        raise InvalidDomainError(
            f"box/cells_per_axis length must equal dim={dim}"
        )
    for (lo, hi) in box:
        if not hi > lo:
            raise InvalidDomainError(f"degenerate box axis ({lo}, {hi})")
    for n in cells_per_axis:
        if int(n) != n or n < 1:
            raise InvalidDomainError(f"cells_per_axis entries must be >= 1, got {n}")
    return BackgroundMesh(
        dim=dim,
        box=tuple((float(lo), float(hi)) for lo, hi in box),
        cells_per_axis=tuple(int(n) for n in cells_per_axis),
    )


def enumerate_faces(mesh: BackgroundMesh) -> list[Face]:
    """All mesh faces (interior and boundary) in a fixed deterministic order:
    axis-major, then lexicographic in the face's position."""
    faces: list[Face] = []
    w = mesh.widths
    for axis in range(mesh.dim):
        n_axis = mesh.cells_per_axis[axis]
        # iterate over face planes i = 0..n_axis along `axis`, cross section
        # over the remaining axes
        other = [a for a in range(mesh.dim) if a != axis]
        cross_shape = [mesh.cells_per_axis[a] for a in other]
        for plane in range(n_axis + 1):
            coord = mesh.box[axis][0] + plane * w[axis]
            for cross in np.ndindex(*cross_shape):
                multi = [0] * mesh.dim
                for a, i in zip(other, cross):
                    multi[a] = i
                minus = plus = None
                if plane > 0:
                    multi[axis] = plane - 1
                    minus = mesh.flat_index(multi)
                if plane < n_axis:
                    multi[axis] = plane
                    plus = mesh.flat_index(multi)
                lo = [0.0] * mesh.dim
                hi = [0.0] * mesh.dim
                for a in range(mesh.dim):
                    if a == axis:
                        lo[a] = hi[a] = coord
                    else:
                        lo[a] = mesh.box[a][0] + multi[a] * w[a]
                        hi[a] = lo[a] + w[a]
                faces.append(
                    Face(axis=axis, minus=minus, plus=plus, lo=tuple(lo), hi=tuple(hi))
                )
    return faces


def mesh_graph(mesh: BackgroundMesh) -> MeshGraph:
    """Face-adjacency graph: one edge per interior face."""
    edges = []
    adjacency: list[list[int]] = [[] for _ in range(mesh.num_cells)]
    for face in enumerate_faces(mesh):
        if face.minus is not None and face.plus is not None:
            a, b = sorted((face.minus, face.plus))
            edges.append((a, b))
            adjacency[a].append(b)
            adjacency[b].append(a)
    edges.sort()
    return MeshGraph(
        num_cells=mesh.num_cells,
        edges=tuple(edges),
        adjacency=tuple(tuple(sorted(nb)) for nb in adjacency),
    )


def connected_components(
    agg_map: AggregationMap, graph: Optional[MeshGraph] = None
) -> list[list[int]]:
    """Aggregates of an aggregation map: connected components of its edges,
    with untouched cells as singletons.

    Components are sorted ascending by their representative (minimum cell
    index); each component is itself sorted.  If ``graph`` is given, every
    map edge must be a graph edge.
    """
    if graph is not None:
        gset = frozenset(graph.edges)
        for e in agg_map.edges:
            key = tuple(sorted(e))
            if key not in gset:
                raise InvalidMapError(f"edge {key} not in mesh graph")
    parent = list(range(agg_map.num_cells))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in sorted(tuple(sorted(e)) for e in agg_map.edges):
        ra, rb = find(a), find(b)
        if ra != rb:
            if ra > rb:
                ra, rb = rb, ra
            parent[rb] = ra
    groups: dict[int, list[int]] = {}
    for c in range(agg_map.num_cells):
        groups.setdefault(find(c), []).append(c)
    return [sorted(groups[r]) for r in sorted(groups)]


def _axis_block(i: int, n: int, width: int) -> int:
    """Block id of index ``i`` among ``n`` indices at the given block width.

    The last block absorbs any remainder (n not divisible by width)."""
    nblocks = max(n // width, 1)
    return min(i // width, nblocks - 1)


def build_multigrid_aggregation_sequence(
    mesh: BackgroundMesh, num_levels: int
) -> list[AggregationMap]:
    """Nested aggregation maps: level 1 is empty, level l groups cells into
    axis-aligned index blocks of width 2**(l-1) per axis, remainder cells
    absorbed into the last block of each axis.
    """
    if num_levels < 1:
        raise InvalidConfigError(f"num_levels must be >= 1, got {num_levels}")
    graph = mesh_graph(mesh)
    maps: list[AggregationMap] = []
    for level in range(1, num_levels + 1):
        width = 2 ** (level - 1)

        def block_vector(j: int) -> tuple[int, ...]:
            multi = mesh.multi_index(j)
            return tuple(
                _axis_block(i, n, width)
                for i, n in zip(multi, mesh.cells_per_axis)
            )

        edges = frozenset(
            (a, b) for a, b in graph.edges if block_vector(a) == block_vector(b)
        )
        maps.append(AggregationMap(num_cells=mesh.num_cells, edges=edges))
    return maps
