"""Input validation helpers for the estimator and CLI surfaces."""

from __future__ import annotations

import numpy as np


def check_feature_array(X, n_cells: int) -> np.ndarray:
    """Coerce X to (N, dim, n_cells) float64.

    Accepts the 3-D layout directly or the flat 2-D layout whose rows are
    the per-cell feature vectors concatenated in row-major cell order.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        if X.shape[1] % n_cells != 0:
            raise ValueError(
                f"flat features with {X.shape[1]} columns do not divide into "
                f"{n_cells} cells")
        dim = X.shape[1] // n_cells
        X = X.reshape(X.shape[0], n_cells, dim).transpose(0, 2, 1)
    if X.ndim != 3:
        raise ValueError(f"features must be 2-D or 3-D, got ndim={X.ndim}")
    if X.shape[2] != n_cells:
        raise ValueError(f"expected {n_cells} cells, got {X.shape[2]}")
    if X.shape[0] < 1:
        raise ValueError("need at least one sample")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    return np.ascontiguousarray(X)


def check_label_matrix(y, n_labels: int | None = None) -> np.ndarray:
    """Coerce labels to (N, L) in {-1, +1}; {0, 1} input is mapped up."""
    y = np.asarray(y)
    if y.ndim != 2:
        raise ValueError(f"labels must be a 2-D matrix, got ndim={y.ndim}")
    vals = set(np.unique(y).tolist())
    if vals <= {0, 1}:
        y = np.where(y == 1, 1, -1)
    elif not vals <= {-1, 1}:
        raise ValueError(f"labels must be in {{0,1}} or {{-1,+1}}, got {sorted(vals)}")
    if n_labels is not None and y.shape[1] != n_labels:
        raise ValueError(f"expected {n_labels} label columns, got {y.shape[1]}")
    if y.shape[1] < 1:
        raise ValueError("need at least one label column")
    return y.astype(np.int64)


def cooccurrence_counts(labels: np.ndarray) -> np.ndarray:
    """Symmetric matrix of joint positive counts between label pairs."""
    pos = (labels == 1).astype(np.float64)
    return pos.T @ pos
