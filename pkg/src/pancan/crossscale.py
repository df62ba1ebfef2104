"""Cross-scale fusion: salient anchors with non-maximum suppression, then
attention-weighted aggregation of each macro-cell's micro-cells.

A macro-cell covers a window x window block of the finer grid placed at
multiples of the stride (clipped at the borders).  The most salient micro
cell of each macro-cell, filtered by NMS for spatial diversity, acts as the
attention query; member weights follow the same scaled inner-product scheme
as the multi-order layer.  The fused vector, concatenated with the anchor's
own features, is down-projected with a ReLU.

Anchor choice is a hard selection: gradients flow through the features of
the selected cells, never through the choice itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import ConfigError
from .grids import CellFeatures, GridSpec
from .numeric import Mat


@dataclass(frozen=True)
class MacroCellMap:
    """Micro-cell membership of every macro-cell between two grids."""

    fine: GridSpec
    coarse: GridSpec
    window: int
    stride: int
    members: tuple[np.ndarray, ...]

    def membership_mask(self) -> np.ndarray:
        out = np.zeros((self.coarse.n_cells, self.fine.n_cells), dtype=bool)
        for macro, cells in enumerate(self.members):
            out[macro, cells] = True
        return out


def build_macro_map(fine: GridSpec, coarse: GridSpec, window: int = 2,
                    stride: int = 2) -> MacroCellMap:
    if window < stride:
        raise ConfigError("window smaller than stride leaves micro-cells uncovered")
    want_rows = -(-fine.n_rows // stride)
    want_cols = -(-fine.n_cols // stride)
    if (coarse.n_rows, coarse.n_cols) != (want_rows, want_cols):
        raise ConfigError(
            f"coarse grid {coarse.n_rows}x{coarse.n_cols} does not match "
            f"ceil({fine.n_rows}/{stride}) x ceil({fine.n_cols}/{stride})")
    members = []
    for mr in range(coarse.n_rows):
        for mc in range(coarse.n_cols):
            rows = range(mr * stride, min(mr * stride + window, fine.n_rows))
            cols = range(mc * stride, min(mc * stride + window, fine.n_cols))
            cells = [fine.cell_index(r, c) for r in rows for c in cols]
            if not cells:
                raise ConfigError(f"macro-cell ({mr},{mc}) has no members")
            members.append(np.array(cells, dtype=np.intp))
    return MacroCellMap(fine, coarse, window, stride, tuple(members))


@dataclass
class CscamnParams:
    """Anchor-query attention projections plus the fused down-projection."""

    w_q: Mat
    w_m: Mat
    w_v: Mat
    proj_w: Mat
    proj_b: Mat
    nms_radius: int = 1

    def validate(self, d_in):
        if self.proj_w.cols != 2 * d_in:
            raise ConfigError(
                f"fusion projection expects {self.proj_w.cols} inputs, "
                f"concatenation yields {2 * d_in}")


def init_cscamn_params(rng, d_in, out_dim, nms_radius=1) -> CscamnParams:
    s = 1.0 / math.sqrt(d_in)
    return CscamnParams(
        Mat.randn(rng, d_in, d_in, s),
        Mat.randn(rng, d_in, d_in, s),
        Mat.randn(rng, d_in, d_in, s),
        Mat.randn(rng, out_dim, 2 * d_in, 1.0 / math.sqrt(2 * d_in)),
        Mat.zeros(out_dim, 1),
        nms_radius)


def saliency(cf: CellFeatures | np.ndarray) -> np.ndarray:
    """Per-cell importance as the column norms of the feature block."""
    feats = cf.feats if isinstance(cf, CellFeatures) else np.asarray(cf)
    return nm.l2_col_norms(feats)


def _chebyshev(grid: GridSpec, a: int, b: int) -> int:
    ra, ca = grid.cell_coords(a)
    rb, cb = grid.cell_coords(b)
    return max(abs(ra - rb), abs(ca - cb))


def select_anchors(sal: np.ndarray, mmap: MacroCellMap,
                   nms_radius: int) -> np.ndarray:
    """One anchor per macro-cell, greedily separated on the fine grid.

    Macro-cells are visited in decreasing order of their best member
    saliency; each takes its most salient member lying strictly more than
    nms_radius (Chebyshev) away from every anchor chosen so far, falling
    back to the raw argmax when every member is suppressed.  All ties break
    toward the lowest cell index.
    """
    n_macro = len(mmap.members)
    order = sorted(range(n_macro),
                   key=lambda m: (-sal[mmap.members[m]].max(), m))
    anchors = np.full(n_macro, -1, dtype=np.intp)
    chosen: list[int] = []
    for macro in order:
        cells = mmap.members[macro]
        ranked = sorted(cells, key=lambda c: (-sal[c], c))
        pick = None
        for cell in ranked:
            if all(_chebyshev(mmap.fine, cell, other) > nms_radius
                   for other in chosen):
                pick = cell
                break
        if pick is None:
            pick = ranked[0]
        anchors[macro] = pick
        chosen.append(pick)
    return anchors


def fuse_macro(anchor_idx: int, members: np.ndarray, feats: np.ndarray,
               p: CscamnParams) -> np.ndarray:
    """Reference fusion of one macro-cell (value level, no tape)."""
    if anchor_idx not in members:
        raise ConfigError("anchor must be one of the macro-cell members")
    d = feats.shape[0]
    anchor = feats[:, anchor_idx]
    block = feats[:, members]
    scores = ((p.w_q.data @ anchor) @ (p.w_m.data @ block)) / math.sqrt(d)
    e = np.exp(scores - scores.max())
    probs = e / e.sum()
    fused = (p.w_v.data @ block) @ probs
    cat = np.concatenate([fused, anchor])
    return np.maximum(p.proj_w.data @ cat + p.proj_b.data[:, 0], 0.0)


def anchors_per_sample(feats_value: np.ndarray, mmap: MacroCellMap,
                       nms_radius: int, n_samples: int) -> np.ndarray:
    """Global anchor column indices for a batched feature block."""
    n_fine = mmap.fine.n_cells
    out = []
    for b in range(n_samples):
        block = feats_value[:, b * n_fine:(b + 1) * n_fine]
        sal = nm.l2_col_norms(block)
        out.append(select_anchors(sal, mmap, nms_radius) + b * n_fine)
    return np.concatenate(out)


def cscamn_batched(feats: Mat, mmap: MacroCellMap, p: CscamnParams,
                   recorder=None, key=None) -> Mat:
    """Fuse every macro-cell of every sample into the coarse feature block."""
    n_fine = mmap.fine.n_cells
    n_coarse = mmap.coarse.n_cells
    if feats.cols % n_fine != 0:
        raise ConfigError("feature columns do not tile the fine grid")
    b = feats.cols // n_fine
    d = feats.rows
    anchor_cols = anchors_per_sample(feats.data, mmap, p.nms_radius, b)
    anchors = nm.gather_cols(feats, anchor_cols)
    q = nm.matmul(p.w_q, anchors)
    keys = nm.matmul(p.w_m, feats)
    scores = nm.scale(nm.sample_scores(q, keys, n_coarse, n_fine),
                      1.0 / math.sqrt(d))
    mask = np.tile(mmap.membership_mask(), (b, 1))
    probs = nm.masked_softmax_rows(scores, mask)
    if recorder is not None:
        recorder[key] = {"probs": np.array(probs.data),
                         "anchors": np.array(anchor_cols)}
    values = nm.matmul(p.w_v, feats)
    fused = nm.sample_aggregate(values, probs, n_coarse, n_fine)
    cat = nm.concat_rows([fused, anchors])
    return nm.relu(nm.add_col(nm.matmul(p.proj_w, cat), p.proj_b))


def cscamn_module(cf: CellFeatures, mmap: MacroCellMap,
                  p: CscamnParams) -> CellFeatures:
    """Single-sample wrapper producing the coarse-scale cell features."""
    if cf.grid.n_cells != mmap.fine.n_cells:
        raise ConfigError("features and macro map disagree on the fine grid")
    out = cscamn_batched(Mat(cf.feats), mmap, p)
    return CellFeatures(cf.scale + 1, mmap.coarse, out.data)
