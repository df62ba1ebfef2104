"""Image lattices, the cross-scale grid hierarchy, and per-cell features.

Cells of a grid are indexed in row-major order.  A feature block is a d x n
float64 array with one column per cell.  Feature files and PPM images are
the only on-disk formats this module understands.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

FEATS_MAGIC = "PANCAN-FEATS v1"


@dataclass(frozen=True)
class GridSpec:
    """A regular partition of an height_px x width_px image into cells."""

    height_px: int
    width_px: int
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if min(self.height_px, self.width_px, self.n_rows, self.n_cols) < 1:
            raise ConfigError(f"grid dimensions must be positive: {self}")

    @classmethod
    def cells(cls, n_rows, n_cols):
        """A grid defined only by its cell counts (one pixel per cell)."""
        return cls(n_rows, n_cols, n_rows, n_cols)

    @property
    def n_cells(self):
        return self.n_rows * self.n_cols

    def cell_index(self, row, col):
        return row * self.n_cols + col

    def cell_coords(self, index):
        return divmod(index, self.n_cols)


def _split_lengths(extent, parts):
    # first (extent mod parts) segments get the extra pixel
    base, rem = divmod(extent, parts)
    return [base + 1 if i < rem else base for i in range(parts)]


def partition(grid: GridSpec) -> list[tuple[int, int, int, int]]:
    """Pixel boxes (top, left, bottom, right), half-open, in cell order.

    Cell heights differ by at most one pixel: the remainder of the division
    is absorbed by the leading rows/columns.
    """
    if grid.n_rows > grid.height_px or grid.n_cols > grid.width_px:
        raise ConfigError(
            f"grid of {grid.n_rows}x{grid.n_cols} cells exceeds "
            f"{grid.height_px}x{grid.width_px} pixels")
    heights = _split_lengths(grid.height_px, grid.n_rows)
    widths = _split_lengths(grid.width_px, grid.n_cols)
    row_edges = np.cumsum([0] + heights)
    col_edges = np.cumsum([0] + widths)
    boxes = []
    for i in range(grid.n_rows):
        for j in range(grid.n_cols):
            boxes.append((int(row_edges[i]), int(col_edges[j]),
                          int(row_edges[i + 1]), int(col_edges[j + 1])))
    return boxes


@dataclass(frozen=True)
class ScalePyramid:
    """Grids from finest to coarsest, linked by a window/stride decimation."""

    scales: tuple[GridSpec, ...]
    window: int = 2
    stride: int = 2

    @property
    def n_scales(self):
        return len(self.scales)


def build_pyramid(base: GridSpec, window: int = 2, stride: int = 2,
                  max_scales: int | None = None) -> ScalePyramid:
    """Coarsen ceil(n/stride) per level until a 1x1 grid (or max_scales).

    A stride of 1 never coarsens, so max_scales is then mandatory.
    """
    if window < 1 or stride < 1:
        raise ConfigError("window and stride must be >= 1")
    if window < stride:
        raise ConfigError("window smaller than stride leaves cells uncovered")
    if stride == 1 and max_scales is None:
        raise ConfigError("stride=1 requires an explicit max_scales")
    scales = [base]
    rows, cols = base.n_rows, base.n_cols
    while (rows, cols) != (1, 1):
        if max_scales is not None and len(scales) >= max_scales:
            break
        if stride == 1:
            scales.append(GridSpec(base.height_px, base.width_px, rows, cols))
            continue
        rows = -(-rows // stride)
        cols = -(-cols // stride)
        scales.append(GridSpec(base.height_px, base.width_px, rows, cols))
    return ScalePyramid(tuple(scales), window, stride)


def positional_encoding(grid: GridSpec, d_pos: int) -> np.ndarray:
    """Deterministic 2-D sinusoidal code, d_pos x n_cells.

    The first d_pos/2 rows encode the cell row index, the rest the column
    index; within each half, even entries are sines and odd entries cosines
    of geometrically spaced frequencies, so cell (0,0) is all zeros and ones.
    """
    if d_pos < 2 or d_pos % 2 != 0:
        raise ConfigError(f"d_pos must be even and >= 2, got {d_pos}")
    half = d_pos // 2
    out = np.empty((d_pos, grid.n_cells))
    rows = np.repeat(np.arange(grid.n_rows), grid.n_cols).astype(float)
    cols = np.tile(np.arange(grid.n_cols), grid.n_rows).astype(float)
    for axis_offset, value in ((0, rows), (half, cols)):
        for j in range(half):
            freq = 10000.0 ** (-2.0 * (j // 2) / half)
            phase = value * freq
            out[axis_offset + j] = np.sin(phase) if j % 2 == 0 else np.cos(phase)
    return out


@dataclass(frozen=True)
class CellFeatures:
    """Per-cell feature columns at one scale of the pyramid."""

    scale: int
    grid: GridSpec
    feats: np.ndarray = field(repr=False)

    def __post_init__(self):
        f = np.asarray(self.feats, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.grid.n_cells:
            raise ConfigError(
                f"feature block {f.shape} does not match {self.grid.n_cells} cells")
        if not np.all(np.isfinite(f)):
            raise ValueError("CellFeatures rejects non-finite values")
        object.__setattr__(self, "feats", f)

    @property
    def dim(self):
        return self.feats.shape[0]


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image into an (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            if blob[pos:pos + 1].isspace():
                pos += 1
            elif blob[pos:pos + 1] == b"#":
                while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at byte {start}")
        return blob[start:pos]

    if token() != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6) file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise FormatError(f"{path}: bad header near byte {pos}: {exc}") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    need = width * height * 3
    pixels = blob[pos:pos + need]
    if len(pixels) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)


def toy_featurize(image: np.ndarray, grid: GridSpec, d_pos: int = 8) -> CellFeatures:
    """Mean RGB plus an 8-bin intensity histogram per cell, then positions.

    Stands in for a pretrained backbone: 3 mean-channel rows in [0,1], 8
    histogram rows summing to 1 per cell, and d_pos sinusoidal rows below.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ConfigError(f"expected an (H, W, 3) image, got {img.shape}")
    if img.shape[:2] != (grid.height_px, grid.width_px):
        raise ConfigError(
            f"image {img.shape[:2]} does not match grid pixels "
            f"({grid.height_px}, {grid.width_px})")
    img = img.astype(np.float64)
    visual = np.empty((11, grid.n_cells))
    for idx, (top, left, bottom, right) in enumerate(partition(grid)):
        cell = img[top:bottom, left:right, :]
        visual[:3, idx] = cell.reshape(-1, 3).mean(axis=0) / 255.0
        intensity = cell.mean(axis=2).ravel()
        hist, _ = np.histogram(intensity, bins=8, range=(0.0, 256.0))
        visual[3:, idx] = hist / intensity.size
    feats = np.concatenate([visual, positional_encoding(grid, d_pos)], axis=0)
    return CellFeatures(scale=0, grid=grid, feats=feats)


def save_features(cf: CellFeatures, path) -> None:
    """Write the feature-file format: one ASCII header line, then raw floats.

    Floats are little-endian 64-bit, cell by cell in row-major cell order
    (i.e. the transpose of the d x n block).
    """
    header = (f"{FEATS_MAGIC} rows={cf.grid.n_rows} cols={cf.grid.n_cols} "
              f"dim={cf.dim}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(cf.feats.T, dtype="<f8").tobytes())


_HEADER_RE = re.compile(
    rf"^{re.escape(FEATS_MAGIC)} rows=(\d+) cols=(\d+) dim=(\d+)$")


def load_features(path) -> CellFeatures:
    """Inverse of save_features; the round trip is bit-exact on the payload.

    Pixel extents are not stored, so the returned grid uses one pixel per
    cell and scale index 0.
    """
    with open(path, "rb") as fh:
        head = fh.readline()
        try:
            text = head.decode("ascii").rstrip("\n")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: header line is not ASCII") from None
        m = _HEADER_RE.match(text)
        if not m:
            raise FormatError(f"{path}: bad header line {text!r}")
        rows, cols, dim = map(int, m.groups())
        need = rows * cols * dim * 8
        payload = fh.read()
    if len(payload) != need:
        raise FormatError(
            f"{path}: expected {need} payload bytes after the header, "
            f"found {len(payload)} ({need - len(payload)} missing)")
    flat = np.frombuffer(payload, dtype="<f8")
    if not np.all(np.isfinite(flat)):
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise FormatError(f"{path}: non-finite value at float offset {bad}")
    feats = flat.reshape(rows * cols, dim).T.copy()
    return CellFeatures(scale=0, grid=GridSpec.cells(rows, cols), feats=feats)
