"""Synthetic context tasks: motif grids whose labels depend on spatial
arrangement, not on which motifs are present.

Each sample is a grid of cells carrying one motif (or background).  Labels
are defined by predicates over the motif grid:

  0: some A cell has a B cell on its second-order ring (Manhattan distance
     exactly 2); in negatives every B sits on the first-order ring of an A
     (distance exactly 1), so the pair is equally close in both classes and
     only the ring order tells them apart;
  1: some window x window macro-cell (stride = window) holds >= 3 C cells;
  2: at least one D cell exists (context-free on purpose);
  3: the same ring-order predicate over the disjoint motif pair E/F;
  4+: presence of one extra motif per additional label.

Ring pairs land at uniformly drawn ring offsets with no positional
structure beyond the ring order itself, so pooled counts carry no signal
for them and position codes are class-independent.

The generator steers placements toward a target label vector but the stored
labels always come from evaluating the predicates on the final grid, and
the steering is count-matched for the context labels: positives and
negatives contain the same motif counts and differ only in arrangement, so
pooled per-cell features carry no signal for them.  Features are motif
prototype vectors plus Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grids import GridSpec

BACKGROUND = 0
MOTIF_A, MOTIF_B, MOTIF_C, MOTIF_D, MOTIF_E, MOTIF_F = 1, 2, 3, 4, 5, 6

RING1 = ((-1, 0), (1, 0), (0, -1), (0, 1))
RING2 = ((-2, 0), (2, 0), (0, -2), (0, 2),
         (-1, -1), (-1, 1), (1, -1), (1, 1))


def n_motifs_for(n_labels: int) -> int:
    if n_labels < 2:
        raise ConfigError("need at least 2 labels")
    return 6 + max(0, n_labels - 4)


def prototype_bank(n_labels: int, motif_scale: float = 2.0) -> np.ndarray:
    """Column m is the prototype of motif m; background is the zero vector."""
    m = n_motifs_for(n_labels)
    dim = max(8, m)
    bank = np.zeros((dim, m + 1))
    for k in range(1, m + 1):
        bank[k - 1, k] = motif_scale
    return bank


def evaluate_predicates(motifs: np.ndarray, n_labels: int,
                        window: int = 2) -> np.ndarray:
    """Ground-truth +-1 labels of one motif grid."""
    rows, cols = motifs.shape
    out = np.full(n_labels, -1, dtype=np.int64)

    a_cells = np.argwhere(motifs == MOTIF_A)
    b_cells = np.argwhere(motifs == MOTIF_B)
    for ar, ac in a_cells:
        for br, bc in b_cells:
            if abs(ar - br) + abs(ac - bc) == 2:
                out[0] = 1
    if n_labels > 1:
        for mr in range(0, rows, window):
            for mc in range(0, cols, window):
                block = motifs[mr:mr + window, mc:mc + window]
                if (block == MOTIF_C).sum() >= 3:
                    out[1] = 1
    if n_labels > 2 and (motifs == MOTIF_D).any():
        out[2] = 1
    if n_labels > 3:
        e_cells = np.argwhere(motifs == MOTIF_E)
        f_cells = np.argwhere(motifs == MOTIF_F)
        for er, ec in e_cells:
            for fr, fc in f_cells:
                if abs(er - fr) + abs(ec - fc) == 2:
                    out[3] = 1
    for extra in range(4, n_labels):
        if (motifs == MOTIF_F + 1 + (extra - 4)).any():
            out[extra] = 1
    return out


@dataclass(frozen=True)
class SplitData:
    features: np.ndarray   # (N, dim, n_cells)
    labels: np.ndarray     # (N, n_labels) in {-1, +1}
    motifs: np.ndarray     # (N, rows, cols) motif indices

    @property
    def n_samples(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class SynthDataset:
    grid: GridSpec
    n_labels: int
    feature_dim: int
    seed: int
    train: SplitData
    val: SplitData
    test: SplitData

    def split(self, name: str) -> SplitData:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


class _Placer:
    def __init__(self, rng, rows, cols):
        self.rng = rng
        self.rows = rows
        self.cols = cols
        self.grid = np.zeros((rows, cols), dtype=np.int8)

    def empty_cells(self):
        return [tuple(rc) for rc in np.argwhere(self.grid == BACKGROUND)]

    def pick(self, candidates):
        if not candidates:
            return None
        return candidates[self.rng.integers(len(candidates))]

    def put(self, cell, motif):
        self.grid[cell] = motif

    def cells_of(self, motif):
        return [tuple(rc) for rc in np.argwhere(self.grid == motif)]

    def place_pair_offsets(self, first, second, offsets, straddle=None):
        """Drop a motif pair at one of the given displacements.

        With ``straddle`` set, only mates in a different stride-straddle
        macro-cell qualify; the first cell is re-drawn until such a mate
        exists (grids of interest always have one away from full borders).
        """
        for _ in range(64):
            spot = self.pick(self.empty_cells())
            if spot is None:
                return
            near = []
            for dr, dc in offsets:
                cand = (spot[0] + dr, spot[1] + dc)
                if not (0 <= cand[0] < self.rows and 0 <= cand[1] < self.cols):
                    continue
                if self.grid[cand] != BACKGROUND:
                    continue
                if straddle is not None and \
                        (spot[0] // straddle, spot[1] // straddle) == \
                        (cand[0] // straddle, cand[1] // straddle):
                    continue
                near.append(cand)
            mate = self.pick(near)
            if mate is not None:
                self.put(spot, first)
                self.put(mate, second)
                return
        spot = self.pick(self.empty_cells())
        if spot is not None:
            self.put(spot, first)
        mate = self.pick(self.empty_cells())
        if mate is not None:
            self.put(mate, second)

    def place_one_apart(self, motif, min_dist, avoid):
        """Place one motif cell at >= min_dist from every ``avoid`` cell."""
        keep_away = self.cells_of(avoid)
        far = [c for c in self.empty_cells()
               if all(abs(c[0] - a[0]) + abs(c[1] - a[1]) >= min_dist
                      for a in keep_away)]
        spot = self.pick(far) or self.pick(self.empty_cells())
        if spot is not None:
            self.put(spot, motif)


    def macro_cells(self, window):
        out = []
        for mr in range(0, self.rows, window):
            for mc in range(0, self.cols, window):
                cells = [(r, c)
                         for r in range(mr, min(mr + window, self.rows))
                         for c in range(mc, min(mc + window, self.cols))]
                out.append(cells)
        return out

    def place_cluster(self, motif, count, window):
        blocks = [b for b in self.macro_cells(window)
                  if sum(1 for c in b if self.grid[c] == BACKGROUND) >= count]
        block = self.pick(blocks)
        if block is None:
            for cell in self.empty_cells()[:count]:
                self.put(cell, motif)
            return
        free = [c for c in block if self.grid[c] == BACKGROUND]
        chosen = self.rng.permutation(len(free))[:count]
        for i in chosen:
            self.put(free[i], motif)

    def place_spread(self, motif, count, window):
        blocks = self.macro_cells(window)
        order = self.rng.permutation(len(blocks))
        placed = 0
        for bi in order:
            if placed >= count:
                break
            free = [c for c in blocks[bi] if self.grid[c] == BACKGROUND]
            if free:
                self.put(self.pick(free), motif)
                placed += 1


def _pair_budget(n_cells: int) -> tuple[int, int]:
    """How many A/B and E/F pairs fit a grid; both classes carry the same
    counts so the signal lives purely in the arrangement."""
    ab = max(1, n_cells // 40)
    e = max(1, n_cells // 40)
    return ab, e


def _generate_grid(rng, grid: GridSpec, n_labels: int, targets,
                   window: int) -> np.ndarray:
    placer = _Placer(rng, grid.n_rows, grid.n_cols)
    n_ab, n_e = _pair_budget(grid.n_cells)
    # ring pairs: second-order ring for positives, first-order otherwise
    for _ in range(n_ab):
        ring = RING2 if targets[0] else RING1
        placer.place_pair_offsets(MOTIF_A, MOTIF_B, ring)
    if n_labels > 1:
        if targets[1]:
            placer.place_cluster(MOTIF_C, 3, window)
        else:
            placer.place_spread(MOTIF_C, 3, window)
    if n_labels > 2 and targets[2]:
        spot = placer.pick(placer.empty_cells())
        if spot is not None:
            placer.put(spot, MOTIF_D)
    if n_labels > 3:
        for _ in range(n_e):
            ring = RING2 if targets[3] else RING1
            placer.place_pair_offsets(MOTIF_E, MOTIF_F, ring)
    for extra in range(4, n_labels):
        if targets[extra]:
            spot = placer.pick(placer.empty_cells())
            if spot is not None:
                placer.put(spot, MOTIF_F + 1 + (extra - 4))
    return placer.grid


def _features_from_motifs(rng, motifs, bank, noise):
    dim = bank.shape[0]
    flat = motifs.reshape(-1)
    feats = bank[:, flat].astype(np.float64)
    if noise > 0:
        feats = feats + noise * rng.standard_normal((dim, flat.size))
    return feats


def make_synth(seed: int, n_samples: int, grid: GridSpec, n_labels: int = 4,
               noise: float = 0.25, split=(0.7, 0.15, 0.15),
               window: int = 2, motif_scale: float = 2.0) -> SynthDataset:
    """Reproducible dataset; identical seeds give identical bytes."""
    if n_labels < 2:
        raise ConfigError("need at least 2 labels")
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError("split must be three fractions summing to 1")
    rng = np.random.default_rng(seed)
    bank = prototype_bank(n_labels, motif_scale)
    dim = bank.shape[0]
    feats = np.empty((n_samples, dim, grid.n_cells))
    labels = np.empty((n_samples, n_labels), dtype=np.int64)
    motif_store = np.empty((n_samples, grid.n_rows, grid.n_cols), dtype=np.int8)
    for i in range(n_samples):
        targets = rng.random(n_labels) < 0.5
        motifs = _generate_grid(rng, grid, n_labels, targets, window)
        motif_store[i] = motifs
        labels[i] = evaluate_predicates(motifs, n_labels, window)
        feats[i] = _features_from_motifs(rng, motifs, bank, noise)
    if n_samples >= 20:
        rate = (labels == 1).mean(axis=0)
        if (rate < 0.05).any():
            raise ConfigError(f"a label is positive in under 5%: rates {rate}")
    n_train = int(round(split[0] * n_samples))
    n_val = int(round(split[1] * n_samples))
    n_train = min(n_train, n_samples)
    n_val = min(n_val, n_samples - n_train)

    def carve(a, b):
        return SplitData(feats[a:b], labels[a:b], motif_store[a:b])

    return SynthDataset(grid, n_labels, dim, seed,
                        carve(0, n_train),
                        carve(n_train, n_train + n_val),
                        carve(n_train + n_val, n_samples))
