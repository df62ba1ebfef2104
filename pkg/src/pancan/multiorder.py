"""Multi-order context layer: random-walk attention over neighborhood rings,
per-system aggregation, scaled stacking with learned adjacencies, and a
per-cell down-projection.

The batched entry points take a d x (B*n) feature Mat whose column blocks
are samples (see ``numeric``).  Single-sample wrappers operating on
``CellFeatures`` expose the same computation for one grid.

A cell's context under system c and order k is the attention-weighted sum
of its ring members' value projections.  Scores are scaled inner products
of query/key projections; softmax over the ring gives transition
probabilities; an optional threshold keeps only members whose probability
is high relative to the row maximum (the argmax always survives), with the
kept probabilities renormalized.  Per-cell ring contexts for all orders are
stacked per system, mixed over cells by the learned row-stochastic
adjacency, scaled by sqrt(gamma), prepended with the scale's input
features, and linearly projected back to the working width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import ConfigError
from .grids import CellFeatures
from .neighborhoods import (LearnableAdjacency, MemberTable,
                            OrderNeighborhood, member_table, normalize_rows)
from .numeric import Mat


@dataclass
class OrderParams:
    """Query/key/value projections for one (scale, layer, system, order) slot."""

    order: int
    w_q: Mat
    w_m: Mat
    w_v: Mat

    @property
    def attn_dim(self):
        return self.w_q.rows

    @property
    def in_dim(self):
        return self.w_q.cols


@dataclass
class MocamnLayerParams:
    """All learnables of one context layer plus its gamma and threshold."""

    orders: list[list[OrderParams]]       # [system][order slot]
    adjacency: list[LearnableAdjacency]   # one per system
    gamma: float
    tau: float
    proj_w: Mat
    proj_b: Mat

    @property
    def n_systems(self):
        return len(self.orders)

    def context_dim(self):
        return sum(op.attn_dim for op in self.orders[0])

    def validate(self, d_in, d0):
        want = d0 + self.n_systems * self.context_dim()
        if self.proj_w.cols != want:
            raise ConfigError(
                f"projection expects {self.proj_w.cols} rows, stacking yields {want}")
        for per_c in self.orders:
            for op in per_c:
                if op.in_dim != d_in:
                    raise ConfigError(
                        f"order params expect input dim {op.in_dim}, features have {d_in}")


def init_layer_params(rng, adj_masks, orders, d_in, d0, attn_dim, proj_dim,
                      gamma, tau, scale_index=0, layer_index=0) -> MocamnLayerParams:
    """Gaussian-initialized layer parameters over the given support masks."""
    per_c = []
    for _ in adj_masks:
        slots = []
        for k in orders:
            s = 1.0 / math.sqrt(d_in)
            slots.append(OrderParams(
                k,
                Mat.randn(rng, attn_dim, d_in, s),
                Mat.randn(rng, attn_dim, d_in, s),
                Mat.randn(rng, attn_dim, d_in, s)))
        per_c.append(slots)
    adjacency = [LearnableAdjacency.from_mask(m, scale_index, layer_index)
                 for m in adj_masks]
    stack_dim = d0 + len(adj_masks) * attn_dim * len(orders)
    proj_w = Mat.randn(rng, proj_dim, stack_dim, 1.0 / math.sqrt(stack_dim))
    proj_b = Mat.zeros(proj_dim, 1)
    return MocamnLayerParams(per_c, adjacency, gamma, tau, proj_w, proj_b)


# ---------------------------------------------------------------------------
# per-cell reference operations


def attn_score(center: np.ndarray, member: np.ndarray, op: OrderParams) -> float:
    """Scaled query/key inner product of two cells' features."""
    d = center.shape[0]
    q = op.w_q.data @ center
    m = op.w_m.data @ member
    return float(q @ m) / math.sqrt(d)


def transition_probs(center: np.ndarray, members: np.ndarray,
                     op: OrderParams) -> np.ndarray:
    """Softmax of the member scores; empty member sets yield an empty vector."""
    if members.size == 0:
        return np.zeros(0)
    scores = np.array([attn_score(center, members[:, j], op)
                       for j in range(members.shape[1])])
    e = np.exp(scores - scores.max())
    return e / e.sum()


def select_walk(probs: np.ndarray, tau: float, mode: str = "ratio"):
    """Indices surviving the walk threshold plus their renormalized weights.

    ``ratio`` mode keeps members whose probability is at least tau times the
    row maximum; ``literal`` compares the raw probability against tau.  The
    argmax always survives, so the kept set is never empty.
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    if probs.size == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0)
    top = probs.max()
    if mode == "ratio":
        keep = probs >= tau * top
    elif mode == "literal":
        keep = (probs >= tau) | (probs == top)
    else:
        raise ConfigError(f"unknown threshold mode {mode!r}")
    kept = np.flatnonzero(keep)
    weights = probs[kept] / probs[kept].sum()
    return kept, weights


def order_context(members: np.ndarray, probs: np.ndarray,
                  op: OrderParams) -> np.ndarray:
    """Probability-weighted sum of value-projected member features."""
    if members.size == 0:
        return np.zeros(op.attn_dim)
    return (op.w_v.data @ members) @ probs


# ---------------------------------------------------------------------------
# batched layer


def _walk_keep_mask(probs: np.ndarray, base: np.ndarray, tau: float,
                    mode: str) -> np.ndarray:
    """Row-wise survivor mask of the walk threshold (value-level)."""
    rowmax = probs.max(axis=1, keepdims=True)
    if mode == "ratio":
        keep = probs >= tau * rowmax
    elif mode == "literal":
        keep = probs >= tau
    else:
        raise ConfigError(f"unknown threshold mode {mode!r}")
    keep |= (probs == rowmax) & (rowmax > 0)
    return keep & base


def rwca_block(feats: Mat, op: OrderParams, table: MemberTable, n: int,
               tau: float, threshold_mode: str = "ratio",
               attention: bool = True, recorder=None, key=None) -> Mat:
    """Aggregate one (system, order) slot for every cell of every sample.

    ``table`` lists the ring members per cell; rows without members
    contribute zero columns.  With ``attention`` off the weights are
    uniform over the ring (the walk ablation), and the threshold is inert.
    """
    b = feats.cols // n
    if table.m == 0:
        if recorder is not None:
            recorder[key] = np.zeros((b * n, n))
        return Mat._wrap(np.zeros((op.attn_dim, b * n)))
    tiled = np.tile(table.valid, (b, 1))
    if attention:
        d = feats.rows
        q = nm.matmul(op.w_q, feats)
        m = nm.matmul(op.w_m, feats)
        scores = nm.scale(nm.member_scores(q, m, table.gather, n, table.m),
                          1.0 / math.sqrt(d))
        probs = nm.masked_softmax_rows(scores, tiled)
        if tau > 0.0:
            kept = _walk_keep_mask(probs.data, tiled, tau, threshold_mode)
            probs = nm.renormalize_rows(probs, kept)
    else:
        counts = tiled.sum(axis=1, keepdims=True)
        uniform = np.divide(tiled.astype(np.float64), counts,
                            out=np.zeros(tiled.shape, dtype=np.float64),
                            where=counts > 0)
        probs = Mat._wrap(uniform)
    if recorder is not None:
        recorder[key] = _scatter_member_probs(probs.data, table, b)
    v = nm.matmul(op.w_v, feats)
    return nm.member_aggregate(v, probs, table.gather, n, table.m)


def _scatter_member_probs(probs: np.ndarray, table: MemberTable,
                          b: int) -> np.ndarray:
    """Expand (B*n) x m member weights to full (B*n) x n rows for exports."""
    n, m = table.n, table.m
    out = np.zeros((b * n, n))
    rows = np.arange(b * n)
    cell_rows = rows % n
    for j in range(m):
        live = table.valid[cell_rows, j]
        out[rows[live], table.idx[cell_rows[live], j]] = probs[live, j]
    return out


def member_tables(nbhds: dict[int, OrderNeighborhood]) -> dict[int, list[MemberTable]]:
    """Per-order, per-system member tables for the ring masks."""
    return {k: [member_table(mask) for mask in nb_k.masks]
            for k, nb_k in nbhds.items()}


def mocamn_layer_batched(feats: Mat, phi0: Mat,
                         nbhds: dict[int, OrderNeighborhood],
                         p: MocamnLayerParams, n: int, *,
                         threshold_mode: str = "ratio", attention: bool = True,
                         recorder=None, layer_key=0, tables=None) -> Mat:
    """One context layer over batched cell columns."""
    if feats.cols != phi0.cols or feats.cols % n != 0:
        raise ConfigError("feature and input blocks disagree with the grid")
    if tables is None:
        tables = member_tables(nbhds)
    root_gamma = math.sqrt(p.gamma)
    blocks = [phi0]
    for c, per_order in enumerate(p.orders):
        parts = []
        for op in per_order:
            parts.append(rwca_block(
                feats, op, tables[op.order][c], n, p.tau, threshold_mode,
                attention, recorder, (layer_key, c, op.order)))
        phi_c = nm.concat_rows(parts) if len(parts) > 1 else parts[0]
        mixed = nm.sample_apply(phi_c, normalize_rows(p.adjacency[c]), n)
        blocks.append(nm.scale(mixed, root_gamma))
    stacked = nm.concat_rows(blocks)
    return nm.add_col(nm.matmul(p.proj_w, stacked), p.proj_b)


def mocamn_stack_batched(feats: Mat, layers: list[MocamnLayerParams],
                         nbhds: dict[int, OrderNeighborhood], n: int, *,
                         threshold_mode: str = "ratio", attention: bool = True,
                         recorder=None, tables=None) -> Mat:
    """T context layers; the scale's input is re-injected at every layer."""
    if not layers:
        raise ConfigError("a context stack needs at least one layer")
    if tables is None:
        tables = member_tables(nbhds)
    phi0 = feats
    cur = feats
    for t, p in enumerate(layers):
        cur = mocamn_layer_batched(
            cur, phi0, nbhds, p, n, threshold_mode=threshold_mode,
            attention=attention, recorder=recorder, layer_key=t,
            tables=tables)
    return cur


# ---------------------------------------------------------------------------
# single-sample wrappers


def mocamn_layer(cf: CellFeatures, nbhds, p: MocamnLayerParams,
                 phi0: CellFeatures, **flags) -> CellFeatures:
    out = mocamn_layer_batched(Mat(cf.feats), Mat(phi0.feats), nbhds, p,
                               cf.grid.n_cells, **flags)
    return CellFeatures(cf.scale, cf.grid, out.data)


def mocamn_stack(cf: CellFeatures, layers, nbhds, **flags) -> CellFeatures:
    out = mocamn_stack_batched(Mat(cf.feats), layers, nbhds,
                               cf.grid.n_cells, **flags)
    return CellFeatures(cf.scale, cf.grid, out.data)
