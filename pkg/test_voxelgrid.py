"""
Test script for voxel grids, lattice graphs, subgraph splits and difference operators.
"""

from itertools import combinations

import numpy as np
import pytest

from errors import DataError, DimensionError, UsageError
from models import Connectivity, HsParams
from voxelgrid import (VoxelGrid, build_graph, incidence_operator, split_subgraphs,
                       stacked_operator, unit_operator)


def brute_force_edges(grid, moore):
    edges = []
    for a, b in combinations(range(grid.p), 2):
        diff = np.abs(grid.coords[a] - grid.coords[b])
        if (moore and diff.max() == 1) or (not moore and diff.sum() == 1):
            edges.append((a, b))
    return np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)


def chain_grid(n):
    return VoxelGrid.full((n, 1, 1))


def test_single_voxel_has_no_edges():
    graph = build_graph(VoxelGrid.full((1, 1, 1)))
    assert graph.n_edges == 0


def test_cube_edge_counts():
    grid = VoxelGrid.full((2, 2, 2))
    assert build_graph(grid, "face6").n_edges == 12
    assert build_graph(grid, Connectivity.MOORE26).n_edges == 28


@pytest.mark.parametrize("moore", [False, True])
def test_random_mask_matches_brute_force(moore):
    rng = np.random.default_rng(3)
    grid = VoxelGrid.from_mask(rng.random((5, 4, 6)) < 0.6)
    graph = build_graph(grid, "moore26" if moore else "face6")
    np.testing.assert_array_equal(graph.edges, brute_force_edges(grid, moore))


def test_edges_are_ordered_pairs_without_duplicates():
    graph = build_graph(VoxelGrid.full((3, 4, 2)), "moore26")
    assert np.all(graph.edges[:, 0] < graph.edges[:, 1])
    assert len(np.unique(graph.edges, axis=0)) == graph.n_edges
    order = np.lexsort((graph.edges[:, 1], graph.edges[:, 0]))
    np.testing.assert_array_equal(order, np.arange(graph.n_edges))


def test_face6_endpoints_differ_in_one_axis():
    grid = VoxelGrid.full((3, 3, 3))
    graph = build_graph(grid)
    assert graph.n_edges == 54
    diffs = np.abs(grid.coords[graph.edges[:, 0]] - grid.coords[graph.edges[:, 1]])
    assert np.all(diffs.sum(axis=1) == 1)


def test_empty_grid_and_unknown_connectivity():
    with pytest.raises(DataError, match="empty grid"):
        build_graph(VoxelGrid.from_mask(np.zeros((2, 2, 2), dtype=bool)))
    with pytest.raises(UsageError):
        build_graph(VoxelGrid.full((2, 2, 2)), "hex12")


def test_grid_validation():
    with pytest.raises(DataError):
        VoxelGrid((2, 2, 2), [[0, 0, 0], [0, 0, 0]])
    with pytest.raises(DataError):
        VoxelGrid((2, 2, 2), [[0, 0, 2]])
    with pytest.raises(DimensionError):
        VoxelGrid.from_mask(np.ones((2, 2)))
    grid = VoxelGrid((3, 3, 3), [[2, 1, 0], [0, 0, 1]])
    assert grid.index_of((0, 0, 1)) == 1
    with pytest.raises(DataError):
        grid.index_of((1, 1, 1))


def test_split_chain_example():
    graph = build_graph(chain_grid(4))
    split = split_subgraphs(graph, np.array([-1.0, -2.0, 3.0, 4.0]))
    np.testing.assert_array_equal(split.v1, [0, 1])
    np.testing.assert_array_equal(split.v2, [2, 3])
    np.testing.assert_array_equal(split.e1, [[0, 1]])
    np.testing.assert_array_equal(split.e2, [[2, 3]])
    np.testing.assert_array_equal(split.e3, [[1, 2]])


def test_split_zero_goes_to_bias_side_and_single_sign():
    graph = build_graph(chain_grid(3))
    split = split_subgraphs(graph, np.array([0.0, 1.0, -1.0]))
    np.testing.assert_array_equal(split.v1, [0, 2])

    split = split_subgraphs(graph, -np.ones(3))
    assert len(split.e2) == 0 and len(split.e3) == 0
    np.testing.assert_array_equal(split.e1, graph.edges)


def test_split_partitions_edges():
    rng = np.random.default_rng(0)
    grid = VoxelGrid.full((4, 4, 4))
    graph = build_graph(grid, "moore26")
    split = split_subgraphs(graph, rng.normal(size=grid.p))
    assert len(split.e1) + len(split.e2) + len(split.e3) == graph.n_edges
    assert len(np.intersect1d(split.v1, split.v2)) == 0
    assert np.all(np.isin(split.e1, split.v1))
    assert np.all(np.isin(split.e2, split.v2))
    assert np.all(np.isin(split.e3[:, 0], split.v1) != np.isin(split.e3[:, 1], split.v1))


def test_split_errors():
    graph = build_graph(chain_grid(3))
    with pytest.raises(DimensionError):
        split_subgraphs(graph, np.zeros(4))
    with pytest.raises(DataError):
        split_subgraphs(graph, np.array([0.0, np.nan, 1.0]))


def test_stacked_operator_weights():
    graph = build_graph(chain_grid(4))
    split = split_subgraphs(graph, np.array([-1.0, -2.0, 3.0, 4.0]))
    params = HsParams(lambda_pro=0.8, lambda_les=0.4, lambda_proles=1.6)
    operator = stacked_operator(split, params)
    np.testing.assert_allclose(operator.row_weights, [1.0, 0.5, 2.0])
    assert operator.n_rows == 3
    np.testing.assert_allclose(operator.apply(np.full(4, 2.5)), 0.0)
    np.testing.assert_allclose(operator.apply(np.array([1.0, 0.0, 0.0, 0.0])), [1.0, 0.0, 0.0])


def test_equal_penalties_give_unit_weights():
    graph = build_graph(VoxelGrid.full((3, 2, 2)))
    split = split_subgraphs(graph, np.random.default_rng(1).normal(size=12))
    operator = stacked_operator(split, HsParams.homogeneous(0.7))
    np.testing.assert_allclose(operator.row_weights, 1.0)
    assert (operator.matrix != unit_operator(split).matrix).nnz == 0


def test_operator_rows_sum_to_zero():
    operator = incidence_operator(np.array([[0, 2], [1, 2]]), 3, [2.0, 3.0])
    dense = operator.matrix.toarray()
    np.testing.assert_allclose(dense.sum(axis=1), 0.0)
    np.testing.assert_allclose(dense, [[2.0, 0.0, -2.0], [0.0, 3.0, -3.0]])


def test_zero_lambda_pro_is_rejected():
    split = split_subgraphs(build_graph(chain_grid(2)), np.array([1.0, -1.0]))
    with pytest.raises(UsageError, match="undefined weight ratio"):
        stacked_operator(split, HsParams(lambda_pro=0.0, lambda_les=0.0, lambda_proles=0.0))


def test_empty_operator():
    operator = incidence_operator(np.empty((0, 2)), 1)
    assert operator.n_rows == 0
    assert operator.apply(np.array([3.0])).shape == (0,)


def test_relabeling_permutes_edges():
    rng = np.random.default_rng(9)
    grid = VoxelGrid.from_mask(rng.random((4, 3, 3)) < 0.7)
    order = rng.permutation(grid.p)
    relabeled = grid.relabel(order)
    mapped = {tuple(sorted((order[a], order[b]))) for a, b in build_graph(relabeled, "moore26").edges}
    assert mapped == {tuple(e) for e in build_graph(grid, "moore26").edges}
    np.testing.assert_array_equal(relabeled.mask_volume(), grid.mask_volume())
