"""Directional cell adjacencies, higher-order neighborhood rings, and the
learnable per-layer reweighting of first-order relations.

First-order systems are the four axial relations (up/down/left/right), one
boolean n x n mask each.  Order k >= 2 is generated on the merged system by
expanding each member's previous-order set, then removing the center and
every lower order, so orders form disjoint rings around a cell.  Each ring
is split back into directional systems by the sign of the displacement
along the system's axis; diagonal members belong to both adjacent systems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import ConfigError
from .grids import GridSpec

DIRECTIONS = ("up", "down", "left", "right")
_OFFSETS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}


def directional_adjacency(grid: GridSpec, direction: str) -> np.ndarray:
    """Boolean mask with (i, j) true iff cell j is the immediate neighbor of
    cell i in the given direction; border rows stay empty."""
    if direction not in _OFFSETS:
        raise ConfigError(f"unknown direction {direction!r}")
    dr, dc = _OFFSETS[direction]
    n = grid.n_cells
    mask = np.zeros((n, n), dtype=bool)
    for r in range(grid.n_rows):
        for c in range(grid.n_cols):
            rr, cc = r + dr, c + dc
            if 0 <= rr < grid.n_rows and 0 <= cc < grid.n_cols:
                mask[grid.cell_index(r, c), grid.cell_index(rr, cc)] = True
    return mask


@dataclass(frozen=True)
class AdjacencySet:
    """The C directional first-order systems over one grid."""

    grid: GridSpec
    masks: tuple[np.ndarray, ...]
    directions: tuple[str, ...] = DIRECTIONS

    @property
    def C(self):
        return len(self.masks)

    def merged(self) -> np.ndarray:
        out = np.zeros((self.grid.n_cells, self.grid.n_cells), dtype=bool)
        for m in self.masks:
            out |= m
        return out


def build_adjacency_set(grid: GridSpec, directions=DIRECTIONS) -> AdjacencySet:
    masks = tuple(directional_adjacency(grid, d) for d in directions)
    return AdjacencySet(grid, masks, tuple(directions))


@dataclass(frozen=True)
class OrderNeighborhood:
    """Order-k membership masks, one per directional system.

    ``masks[c][i, j]`` is true when cell j belongs to the order-k
    neighborhood of cell i under system c.  ``merged`` is the union over c.
    """

    order: int
    grid: GridSpec
    masks: tuple[np.ndarray, ...]
    merged: np.ndarray

    def members(self, c: int, cell: int) -> np.ndarray:
        return np.flatnonzero(self.masks[c][cell])


def merged_rings(adj: AdjacencySet, k_max: int) -> list[np.ndarray]:
    """Merged-system rings for orders 1..k_max.

    Ring 1 is the union of the directional masks.  Each further ring expands
    every member of the previous ring by that same ring relation, then drops
    the center cell and all lower rings.
    """
    if k_max < 1:
        raise ConfigError(f"order must be >= 1, got {k_max}")
    n = adj.grid.n_cells
    ring = adj.merged()
    rings = [ring]
    taken = ring | np.eye(n, dtype=bool)
    for _ in range(k_max - 1):
        prev = rings[-1]
        nxt = (prev.astype(np.uint8) @ prev.astype(np.uint8)) > 0
        nxt &= ~taken
        rings.append(nxt)
        taken |= nxt
    return rings


def _direction_sector(grid: GridSpec, ring: np.ndarray, direction: str) -> np.ndarray:
    dr, dc = _OFFSETS[direction]
    n = grid.n_cells
    coords = np.array([grid.cell_coords(i) for i in range(n)])
    delta_r = coords[None, :, 0] - coords[:, None, 0]
    delta_c = coords[None, :, 1] - coords[:, None, 1]
    along = delta_r * dr + delta_c * dc
    return ring & (along > 0)


def order_k(adj: AdjacencySet, k: int) -> OrderNeighborhood:
    """Order-k membership per directional system.

    k=1 reads the directional masks directly.  For k >= 2 the merged ring is
    computed first and each member is assigned to the systems whose axis
    component of its displacement is positive (diagonals fall in two
    systems, strictly axial members in one).
    """
    if k < 1:
        raise ConfigError(f"order must be >= 1, got {k}")
    if k == 1:
        merged = adj.merged()
        return OrderNeighborhood(1, adj.grid, adj.masks, merged)
    ring = merged_rings(adj, k)[-1]
    masks = tuple(_direction_sector(adj.grid, ring, d) for d in adj.directions)
    return OrderNeighborhood(k, adj.grid, masks, ring)


@dataclass(frozen=True)
class MemberTable:
    """Fixed-width member lists of one boolean neighborhood mask.

    ``idx[i, j]`` is the cell index of member j of cell i (0-padded),
    ``valid`` marks real members, and ``gather`` is the n x (n*m) 0/1
    matrix that pulls member columns out of a d x n block with one GEMM.
    """

    n: int
    m: int
    idx: np.ndarray
    valid: np.ndarray
    gather: np.ndarray


def member_table(mask: np.ndarray) -> MemberTable:
    n = mask.shape[0]
    counts = mask.sum(axis=1)
    m = int(counts.max()) if n else 0
    idx = np.zeros((n, m), dtype=np.intp)
    valid = np.zeros((n, m), dtype=bool)
    gather = np.zeros((n, n * m))
    for i in range(n):
        members = np.flatnonzero(mask[i])
        idx[i, :members.size] = members
        valid[i, :members.size] = True
        for j, cell in enumerate(members):
            gather[cell, i * m + j] = 1.0
    return MemberTable(n, m, idx, valid, gather)


@dataclass
class LearnableAdjacency:
    """One learnable weight per edge of a fixed boolean support.

    ``normalize_rows`` turns the weights into a row-stochastic matrix via a
    softmax over each row's support entries; rows without support stay zero.
    The weights Mat is the optimizer-visible parameter.
    """

    n: int
    support_rows: np.ndarray
    support_cols: np.ndarray
    weights: nm.Mat
    scale_index: int = 0
    layer_index: int = 0

    @classmethod
    def from_mask(cls, mask: np.ndarray, scale_index=0, layer_index=0,
                  init: np.ndarray | None = None):
        rows, cols = np.nonzero(mask)
        if init is None:
            init = np.zeros(rows.size)
        weights = nm.Mat(np.asarray(init, dtype=np.float64).reshape(1, -1))
        if weights.cols != rows.size:
            raise ConfigError("initial weights do not match support size")
        return cls(mask.shape[0], rows, cols, weights, scale_index, layer_index)

    @property
    def n_edges(self):
        return self.support_rows.size


def normalize_rows(la: LearnableAdjacency) -> nm.Mat:
    """Differentiable row-stochastic matrix over the support."""
    return nm.support_softmax(la.weights, la.support_rows, la.support_cols, la.n)
