import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cutdg.errors import InvalidConfigError, InvalidDomainError, InvalidMapError
from cutdg.mesh import (
    AggregationMap,
    build_cartesian,
    build_multigrid_aggregation_sequence,
    connected_components,
    enumerate_faces,
    mesh_graph,
)


def test_build_cartesian_2x2_unit_cells():
    mesh = build_cartesian([(-1, 1), (-1, 1)], [2, 2])
    assert mesh.num_cells == 4
    assert mesh.cell_volume == pytest.approx(1.0)
    lo, hi = mesh.cell_bounds(0)
    assert np.allclose(lo, [-1, -1]) and np.allclose(hi, [0, 0])
    lo, hi = mesh.cell_bounds(3)
    assert np.allclose(lo, [0, 0]) and np.allclose(hi, [1, 1])


def test_build_cartesian_2x2x2():
    mesh = build_cartesian([(-1, 1)] * 3, [2, 2, 2])
    assert mesh.num_cells == 8
    assert mesh.cell_volume == pytest.approx(1.0)


def test_build_cartesian_rejects_zero_cells():
    with pytest.raises(InvalidDomainError):
        build_cartesian([(-1, 1)] * 3, [2, 0, 2])


def test_build_cartesian_rejects_degenerate_box():
    with pytest.raises(InvalidDomainError):
        build_cartesian([(-1, 1), (1, 1)], [2, 2])


def test_flat_multi_index_roundtrip():
    mesh = build_cartesian([(0, 3), (0, 4), (0, 5)], [3, 4, 5])
    for j in range(mesh.num_cells):
        assert mesh.flat_index(mesh.multi_index(j)) == j
    # first axis fastest
    assert mesh.multi_index(1) == (1, 0, 0)
    assert mesh.multi_index(3) == (0, 1, 0)


def test_mesh_graph_edge_counts():
    assert len(mesh_graph(build_cartesian([(-1, 1)] * 2, [2, 2])).edges) == 4
    assert len(mesh_graph(build_cartesian([(-1, 1)] * 3, [2, 2, 2])).edges) == 12
    assert len(mesh_graph(build_cartesian([(-1, 1)] * 2, [1, 1])).edges) == 0


@given(
    nx=st.integers(1, 8), ny=st.integers(1, 8), nz=st.integers(0, 8)
)
@settings(max_examples=40, deadline=None)
def test_mesh_graph_edge_count_closed_form(nx, ny, nz):
    if nz == 0:
        mesh = build_cartesian([(0, 1)] * 2, [nx, ny])
        expected = (nx - 1) * ny + nx * (ny - 1)
    else:
        mesh = build_cartesian([(0, 1)] * 3, [nx, ny, nz])
        expected = (
            (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)
        )
    assert len(mesh_graph(mesh).edges) == expected


def test_face_enumeration_counts_and_sides():
    mesh = build_cartesian([(-1, 1)] * 2, [2, 2])
    faces = enumerate_faces(mesh)
    # per axis: 3 planes x 2 cross cells = 6 faces -> 12 total
    assert len(faces) == 12
    interior = [f for f in faces if not f.is_boundary]
    boundary = [f for f in faces if f.is_boundary]
    assert len(interior) == 4
    assert len(boundary) == 8
    for f in interior:
        assert f.minus is not None and f.plus is not None
        assert f.lo[f.axis] == f.hi[f.axis]


def test_connected_components_strip():
    # 1x3 strip, edges {0,1},{1,2} -> single aggregate, representative 0
    mesh = build_cartesian([(0, 3), (0, 1)], [3, 1])
    graph = mesh_graph(mesh)
    amap = AggregationMap(num_cells=3, edges=frozenset({(0, 1), (1, 2)}))
    comps = connected_components(amap, graph)
    assert comps == [[0, 1, 2]]


def test_connected_components_empty_map_gives_singletons():
    amap = AggregationMap(num_cells=5, edges=frozenset())
    assert connected_components(amap) == [[0], [1], [2], [3], [4]]


def test_connected_components_two_pairs():
    mesh = build_cartesian([(0, 1)] * 2, [2, 2])
    graph = mesh_graph(mesh)
    amap = AggregationMap(num_cells=4, edges=frozenset({(0, 1), (2, 3)}))
    assert connected_components(amap, graph) == [[0, 1], [2, 3]]


def test_connected_components_rejects_non_graph_edge():
    mesh = build_cartesian([(0, 1)] * 2, [2, 2])
    graph = mesh_graph(mesh)
    amap = AggregationMap(num_cells=4, edges=frozenset({(0, 3)}))  # diagonal
    with pytest.raises(InvalidMapError):
        connected_components(amap, graph)


def test_connected_components_edge_order_independent():
    edges = [(0, 1), (1, 2), (3, 4)]
    a = AggregationMap(num_cells=6, edges=frozenset(edges))
    b = AggregationMap(num_cells=6, edges=frozenset(reversed(edges)))
    assert connected_components(a) == connected_components(b)


def test_aggregation_sequence_8x8_three_levels():
    mesh = build_cartesian([(0, 8)] * 2, [8, 8])
    maps = build_multigrid_aggregation_sequence(mesh, 3)
    assert len(maps) == 3
    assert len(maps[0].edges) == 0
    lvl2 = connected_components(maps[1])
    assert len(lvl2) == 16 and all(len(g) == 4 for g in lvl2)
    lvl3 = connected_components(maps[2])
    assert len(lvl3) == 4 and all(len(g) == 16 for g in lvl3)


def test_aggregation_sequence_9x9_remainder_absorption():
    # width-2 blocks on 9 cells per axis: 4 blocks, last one 3 wide
    mesh = build_cartesian([(0, 9)] * 2, [9, 9])
    maps = build_multigrid_aggregation_sequence(mesh, 2)
    comps = connected_components(maps[1])
    sizes = sorted(len(g) for g in comps)
    assert len(comps) == 16
    assert sizes == [4] * 9 + [6] * 6 + [9]


def test_aggregation_sequence_level1_is_empty():
    mesh = build_cartesian([(0, 1)] * 3, [4, 4, 4])
    maps = build_multigrid_aggregation_sequence(mesh, 1)
    assert len(maps) == 1 and len(maps[0].edges) == 0


def test_aggregation_sequence_rejects_bad_level_count():
    mesh = build_cartesian([(0, 1)] * 2, [4, 4])
    with pytest.raises(InvalidConfigError):
        build_multigrid_aggregation_sequence(mesh, 0)


@given(
    nx=st.integers(1, 9),
    ny=st.integers(1, 9),
    levels=st.integers(1, 4),
)
@settings(max_examples=30, deadline=None)
def test_aggregation_sequence_nested(nx, ny, levels):
    mesh = build_cartesian([(0, 1)] * 2, [nx, ny])
    maps = build_multigrid_aggregation_sequence(mesh, levels)
    for coarse, fine in zip(maps[1:], maps[:-1]):
        assert fine.edges <= coarse.edges
        fine_comps = connected_components(fine)
        coarse_comps = connected_components(coarse)
        # every coarse aggregate is a union of fine aggregates
        cell_to_coarse = {}
        for gi, g in enumerate(coarse_comps):
            for c in g:
                cell_to_coarse[c] = gi
        for g in fine_comps:
            assert len({cell_to_coarse[c] for c in g}) == 1
