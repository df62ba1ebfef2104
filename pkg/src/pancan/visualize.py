"""Context-weight exports: grid heatmaps as portable graymaps plus raw CSV.

Influence maps are read off a recorded forward pass: the multi-order
recorder holds the per-(layer, system, order) transition probabilities, the
cross-scale recorder the micro-to-macro attention weights.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .grids import CellFeatures
from .model import PanCANModel


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ConfigError("PGM output needs a 2-D array")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ConfigError("PPM output needs an (H, W, 3) array")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def weights_to_gray(weights: np.ndarray, cell_px: int = 40) -> np.ndarray:
    """Normalize a weight grid to 0..255 and blow each cell up to pixels."""
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = float(w.min()), float(w.max())
    if hi - lo < 1e-300:
        norm = np.full_like(w, 0.5)
    else:
        norm = (w - lo) / (hi - lo)
    gray = np.round(255 * norm).astype(np.uint8)
    return np.kron(gray, np.ones((cell_px, cell_px), dtype=np.uint8))


def write_csv_matrix(path, mat: np.ndarray) -> None:
    mat = np.asarray(mat, dtype=np.float64)
    lines = [",".join(f"{v:.10g}" for v in row) for row in np.atleast_2d(mat)]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def context_influence(model: PanCANModel, cf: CellFeatures, cell: tuple[int, int],
                      layer: int) -> np.ndarray:
    """Influence of every cell on one center cell at a given context layer.

    Sums the recorded transition probabilities over all neighborhood systems
    and orders of the finest scale, so warmer cells are the walk's preferred
    context for the chosen center.
    """
    grid = model.structure.grids[0]
    r, c = cell
    if not (0 <= r < grid.n_rows and 0 <= c < grid.n_cols):
        raise ConfigError(f"cell {cell} outside the {grid.n_rows}x{grid.n_cols} grid")
    if not 0 <= layer < model.cfg.depth[0]:
        raise ConfigError(f"layer {layer} outside depth {model.cfg.depth[0]}")
    recorder: dict = {}
    model.forward(cf, recorder=recorder)
    center = grid.cell_index(r, c)
    maps = recorder[("mocamn", 0)]
    total = np.zeros(grid.n_cells)
    for (t, _c, _k), probs in maps.items():
        if t == layer:
            total += probs[center]
    return total.reshape(grid.n_rows, grid.n_cols)


def scale_influence(model: PanCANModel, cf: CellFeatures,
                    scale: int) -> np.ndarray:
    """Importance of each micro-cell inside its macro-cell at one transition.

    Reads the cross-scale attention row of the macro-cell covering each
    micro-cell; overlapping coverage keeps the largest weight.
    """
    if not 0 <= scale < model.cfg.n_scales - 1:
        raise ConfigError(
            f"scale {scale} has no transition (model has "
            f"{model.cfg.n_scales} scales)")
    recorder: dict = {}
    model.forward(cf, recorder=recorder)
    probs = recorder[("cscamn", scale)]["probs"]
    mmap = model.structure.macro_maps[scale]
    fine = mmap.fine
    out = np.zeros(fine.n_cells)
    for macro, cells in enumerate(mmap.members):
        for j in cells:
            out[j] = max(out[j], probs[macro, j])
    return out.reshape(fine.n_rows, fine.n_cols)
