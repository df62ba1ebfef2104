"""Directional masks, order-k ring semantics, and learned adjacency rows."""

from collections import deque

import numpy as np
import pytest

from pancan import neighborhoods as nb
from pancan import numeric as nm
from pancan.errors import ConfigError
from pancan.grids import GridSpec


def bfs_distances(grid: GridSpec, start: int) -> np.ndarray:
    """Grid-graph (4-connected) BFS distances from one cell."""
    dist = np.full(grid.n_cells, -1)
    dist[start] = 0
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        r, c = grid.cell_coords(cur)
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < grid.n_rows and 0 <= cc < grid.n_cols:
                nxt = grid.cell_index(rr, cc)
                if dist[nxt] < 0:
                    dist[nxt] = dist[cur] + 1
                    queue.append(nxt)
    return dist


class TestDirectionalMasks:
    def test_single_cell_grid_empty(self):
        adj = nb.build_adjacency_set(GridSpec.cells(1, 1))
        for mask in adj.masks:
            assert not mask.any()

    def test_center_right_neighbor_3x3(self):
        grid = GridSpec.cells(3, 3)
        mask = nb.directional_adjacency(grid, "right")
        center = grid.cell_index(1, 1)
        assert list(np.flatnonzero(mask[center])) == [grid.cell_index(1, 2)]

    def test_total_edge_count_8x10(self):
        adj = nb.build_adjacency_set(GridSpec.cells(8, 10))
        total = sum(int(m.sum()) for m in adj.masks)
        assert total == 2 * (7 * 10 + 8 * 9)  # 284 directed grid edges

    def test_up_down_left_right_transpose_pairs(self):
        adj = nb.build_adjacency_set(GridSpec.cells(4, 6))
        up, down, left, right = adj.masks
        np.testing.assert_array_equal(up, down.T)
        np.testing.assert_array_equal(left, right.T)

    def test_at_most_one_neighbor_per_row(self):
        adj = nb.build_adjacency_set(GridSpec.cells(5, 7))
        for mask in adj.masks:
            assert mask.sum(axis=1).max() <= 1


class TestOrderK:
    def test_first_order_up_is_cell_above(self):
        grid = GridSpec.cells(3, 3)
        adj = nb.build_adjacency_set(grid)
        nbhd = nb.order_k(adj, 1)
        center = grid.cell_index(1, 1)
        assert list(nbhd.members(0, center)) == [grid.cell_index(0, 1)]

    def test_second_order_is_distance_two_ring(self):
        grid = GridSpec.cells(5, 5)
        adj = nb.build_adjacency_set(grid)
        merged2 = nb.order_k(adj, 2).merged
        for cell in range(grid.n_cells):
            dist = bfs_distances(grid, cell)
            np.testing.assert_array_equal(merged2[cell], dist == 2)

    def test_first_order_merged_is_distance_one(self):
        grid = GridSpec.cells(5, 5)
        adj = nb.build_adjacency_set(grid)
        merged1 = nb.order_k(adj, 1).merged
        for cell in range(grid.n_cells):
            dist = bfs_distances(grid, cell)
            np.testing.assert_array_equal(merged1[cell], dist == 1)

    def test_orders_disjoint_and_exclude_center(self):
        for rows, cols in ((3, 3), (4, 6), (8, 10), (1, 2), (2, 3)):
            grid = GridSpec.cells(rows, cols)
            adj = nb.build_adjacency_set(grid)
            merged = [nb.order_k(adj, k).merged for k in (1, 2, 3)]
            for cell in range(grid.n_cells):
                seen = set()
                for m in merged:
                    members = set(np.flatnonzero(m[cell]))
                    assert cell not in members
                    assert not (members & seen)
                    seen |= members

    def test_sector_split_covers_ring(self):
        grid = GridSpec.cells(5, 5)
        adj = nb.build_adjacency_set(grid)
        nbhd = nb.order_k(adj, 2)
        union = np.zeros_like(nbhd.merged)
        for m in nbhd.masks:
            union |= m
        np.testing.assert_array_equal(union, nbhd.merged)

    def test_diagonal_member_in_two_systems(self):
        grid = GridSpec.cells(5, 5)
        adj = nb.build_adjacency_set(grid)
        nbhd = nb.order_k(adj, 2)
        center = grid.cell_index(2, 2)
        diag = grid.cell_index(1, 3)  # up and right of center
        holders = [c for c in range(4) if nbhd.masks[c][center, diag]]
        assert holders == [0, 3]  # up, right

    def test_invalid_order_rejected(self):
        adj = nb.build_adjacency_set(GridSpec.cells(2, 2))
        with pytest.raises(ConfigError):
            nb.order_k(adj, 0)


class TestLearnableAdjacency:
    def test_single_entry_row_gets_weight_one(self):
        mask = np.zeros((3, 3), dtype=bool)
        mask[0, 2] = True
        la = nb.LearnableAdjacency.from_mask(mask)
        out = nb.normalize_rows(la).data
        assert out[0, 2] == pytest.approx(1.0)
        np.testing.assert_array_equal(out[1:], 0.0)

    def test_equal_weights_uniform(self):
        mask = np.zeros((3, 3), dtype=bool)
        mask[1] = [True, True, True]
        la = nb.LearnableAdjacency.from_mask(mask)
        out = nb.normalize_rows(la).data
        np.testing.assert_allclose(out[1], 1.0 / 3.0, atol=1e-12)

    def test_matches_per_row_softmax_oracle(self):
        rng = np.random.default_rng(0)
        mask = rng.random((6, 6)) > 0.5
        la = nb.LearnableAdjacency.from_mask(mask, init=rng.standard_normal(mask.sum()))
        out = nb.normalize_rows(la).data
        w = np.full((6, 6), -np.inf)
        w[mask] = la.weights.data[0]
        for i in range(6):
            if mask[i].any():
                e = np.exp(w[i][mask[i]] - w[i][mask[i]].max())
                np.testing.assert_allclose(out[i][mask[i]], e / e.sum(), atol=1e-12)
                assert out[i].sum() == pytest.approx(1.0, abs=1e-12)
            else:
                np.testing.assert_array_equal(out[i], 0.0)

    def test_normalization_gradient(self):
        rng = np.random.default_rng(1)
        grid = GridSpec.cells(3, 3)
        mask = nb.directional_adjacency(grid, "up")
        la = nb.LearnableAdjacency.from_mask(mask, init=rng.standard_normal(mask.sum()))
        mix = nm.Mat(rng.standard_normal((grid.n_cells, 2)))

        def f(params):
            probe = nb.LearnableAdjacency(la.n, la.support_rows, la.support_cols, params[0])
            return nm.sum_all(nm.matmul(nb.normalize_rows(probe), mix))

        assert nm.grad_check(f, [la.weights], eps=1e-5) <= 1e-6
