import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pointgnn.errors import FormatError
from pointgnn.graph import (Graph, build_cell_list, build_graph, cap_edges, format_graph,
                            parse_graph, radius_neighbors, radius_pairs)
from pointgnn.pointcloud import PointCloud


def cloud_of(xyz):
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    return PointCloud(xyz, np.zeros(len(xyz)))


def brute_edges(xyz, r):
    """Direct double loop over ordered pairs."""
    out = []
    for i, j in itertools.permutations(range(len(xyz)), 2):
        if np.sqrt(np.sum((xyz[i] - xyz[j]) ** 2)) < r:
            out.append((j, i))
    return sorted(out, key=lambda e: (e[1], e[0]))


def test_cell_list_basics(rng):
    assert build_cell_list(PointCloud.empty(), 1.0).cells == {}
    assert build_cell_list(cloud_of([[1, 2, 3]]), 1.0).cells == {(0, 0, 0): [0]}
    grid = build_cell_list(cloud_of(rng.uniform(0, 10, (1000, 3))), 2.0)
    assert sum(len(v) for v in grid.cells.values()) == 1000
    assert sorted(i for v in grid.cells.values() for i in v) == list(range(1000))


def test_radius_neighbors_hand_cases():
    pc = cloud_of([[0, 0, 0], [3, 0, 0], [5, 0, 0]])
    grid = build_cell_list(pc, 4.0)
    assert radius_neighbors(grid, pc, 1, 4.0) == [0, 1, 2]
    assert radius_neighbors(grid, pc, 0, 4.0) == [0, 1]


def test_radius_neighbors_rejects_wide_radius():
    pc = cloud_of([[0, 0, 0]])
    with pytest.raises(ValueError):
        radius_neighbors(build_cell_list(pc, 1.0), pc, 0, 1.5)


def test_radius_neighbors_match_brute_force(rng):
    xyz = rng.uniform(0, 30, (2000, 3))
    pc = cloud_of(xyz)
    grid = build_cell_list(pc, 4.0)
    for q in rng.choice(2000, 50, replace=False):
        d = np.linalg.norm(xyz - xyz[q], axis=1)
        assert radius_neighbors(grid, pc, int(q), 4.0) == np.flatnonzero(d < 4.0).tolist()


def test_graph_trivial_cases():
    assert build_graph(cloud_of([[0, 0, 0]]), 4.0).num_edges == 0
    assert build_graph(cloud_of([[0, 0, 0], [4, 0, 0]]), 4.0).num_edges == 0
    assert build_graph(cloud_of([[0, 0, 0]]), 4.0, include_self=True).edges.tolist() == [[0, 0]]


def test_graph_matches_double_loop(rng):
    xyz = rng.uniform(0, 12, (300, 3))
    g = build_graph(cloud_of(xyz), 2.0)
    assert [tuple(e) for e in g.edges.tolist()] == brute_edges(xyz, 2.0)


def test_radius_pairs_between_sets(rng):
    q, ref = rng.uniform(0, 5, (40, 3)), rng.uniform(0, 5, (70, 3))
    qi, ri = radius_pairs(q, ref, 1.0)
    d = np.linalg.norm(q[:, None] - ref[None], axis=2)
    exp_q, exp_r = np.nonzero(d < 1.0)
    assert qi.tolist() == exp_q.tolist() and ri.tolist() == exp_r.tolist()


@given(arrays(np.float64, st.tuples(st.integers(0, 40), st.just(3)),
              elements=st.floats(-6, 6, allow_nan=False)),
       st.floats(0.5, 3.0))
def test_graph_symmetric_irreflexive(xyz, r):
    g = build_graph(cloud_of(xyz), r)
    edges = {tuple(e) for e in g.edges.tolist()}
    assert len(edges) == g.num_edges
    assert all((j, i) in edges for i, j in edges)
    assert all(i != j for i, j in edges)
    d = np.linalg.norm(xyz[g.sources] - xyz[g.destinations], axis=1)
    assert np.all(d < r)


def test_translation_leaves_edge_set_unchanged(rng):
    xyz = rng.uniform(0, 20, (800, 3))
    d = np.linalg.norm(xyz[:, None] - xyz[None], axis=2)
    # keep the comparison tolerance-free: no pair sits near the radius
    assert np.abs(d - 3.0).min() > 1e-6
    base = build_graph(cloud_of(xyz), 3.0).edges
    for _ in range(5):
        t = rng.uniform(-100, 100, 3)
        assert np.array_equal(build_graph(cloud_of(xyz + t), 3.0).edges, base)


def test_cap_identity_when_under_limit(rng):
    g = build_graph(cloud_of(rng.uniform(0, 10, (100, 3))), 2.0)
    assert cap_edges(g, 256) is g


def test_cap_star_graph():
    xyz = np.zeros((301, 3))
    edges = np.array([[j, 0] for j in range(1, 301)])
    g = Graph(cloud_of(xyz), edges, 1.0)
    a, b = cap_edges(g, 256, seed=4), cap_edges(g, 256, seed=4)
    assert a.in_degree()[0] == 256
    assert np.array_equal(a.edges, b.edges)
    assert not np.array_equal(a.edges, cap_edges(g, 256, seed=5).edges)


def test_cap_dense_recount(rng):
    g = build_graph(cloud_of(rng.uniform(0, 3, (400, 3))), 1.5)
    capped = cap_edges(g, 20, seed=1)
    assert np.array_equal(capped.in_degree(), np.minimum(g.in_degree(), 20))
    original = {tuple(e) for e in g.edges.tolist()}
    assert all(tuple(e) in original for e in capped.edges.tolist())


def test_graph_dump_round_trip(rng):
    pc = cloud_of(rng.uniform(0, 5, (30, 3)))
    g = build_graph(pc, 2.0)
    text = format_graph(g)
    assert text.splitlines()[0] == f"30 {g.num_edges} 2.0"
    back = parse_graph(text, pc)
    assert np.array_equal(back.edges, g.edges)
    with pytest.raises(FormatError):
        parse_graph("3 1 2.0\n0 1\n", pc)
