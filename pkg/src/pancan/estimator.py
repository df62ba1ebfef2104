"""Scikit-learn style front end for the full model.

``PanCANClassifier`` is a multi-label classifier over grid-cell features:
``fit`` takes per-sample cell features (flat 2-D or (N, dim, cells) 3-D)
and a binary indicator matrix, ``predict_proba``/``predict`` score new
samples.  Everything configurable is an ``__init__`` parameter so the
estimator composes with ``clone``, ``get_params``, and pipeline tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import training as tr
from .grids import GridSpec, positional_encoding
from .model import PanCANModel, default_config, group_labels
from .validation import check_feature_array, check_label_matrix, cooccurrence_counts


class PanCANClassifier(BaseEstimator, ClassifierMixin):
    """Multi-label classifier with multi-order and cross-scale context.

    Parameters mirror the model and training configuration; the label count
    and feature dimensionality are inferred in ``fit``.  When
    ``add_positional`` is set, sinusoidal position rows are appended to the
    supplied visual features.
    """

    def __init__(self, grid_rows=8, grid_cols=10, window=2, stride=2,
                 max_scales=None, depth=2, attn_dim=8, proj_dim=16,
                 fusion_dim=32, heads=4, max_order=2, gamma=0.5, tau=0.71,
                 threshold_mode="ratio", walk_attention=True, n_groups=2,
                 nms_radius=1, add_positional=True, d_pos=8, epochs=30,
                 batch_size=6, learning_rate=1e-4, weight_decay=1e-4,
                 ema_decay=0.999, patience=20, val_fraction=0.15,
                 random_state=0):
        self.grid_rows = grid_rows
        self.grid_cols = grid_cols
        self.window = window
        self.stride = stride
        self.max_scales = max_scales
        self.depth = depth
        self.attn_dim = attn_dim
        self.proj_dim = proj_dim
        self.fusion_dim = fusion_dim
        self.heads = heads
        self.max_order = max_order
        self.gamma = gamma
        self.tau = tau
        self.threshold_mode = threshold_mode
        self.walk_attention = walk_attention
        self.n_groups = n_groups
        self.nms_radius = nms_radius
        self.add_positional = add_positional
        self.d_pos = d_pos
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.patience = patience
        self.val_fraction = val_fraction
        self.random_state = random_state

    # -- helpers -----------------------------------------------------------

    def _grid(self):
        return GridSpec.cells(self.grid_rows, self.grid_cols)

    def _with_positions(self, feats):
        if not self.add_positional:
            return feats
        pe = positional_encoding(self._grid(), self.d_pos)
        tiled = np.broadcast_to(pe, (feats.shape[0],) + pe.shape)
        return np.concatenate([feats, tiled], axis=1)

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this PanCANClassifier instance is not fitted yet")

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y):
        grid = self._grid()
        feats = check_feature_array(X, grid.n_cells)
        labels = check_label_matrix(y)
        if feats.shape[0] != labels.shape[0]:
            raise ValueError("X and y disagree on the sample count")
        self.n_features_in_ = feats.shape[1] * grid.n_cells
        self.visual_dim_ = feats.shape[1]
        self.n_labels_ = labels.shape[1]
        self.classes_ = np.arange(self.n_labels_)

        n_groups = min(self.n_groups, self.n_labels_)
        groups = group_labels(cooccurrence_counts(labels), n_groups)
        feats = self._with_positions(feats)
        cfg = default_config(
            self.grid_rows, self.grid_cols, feats.shape[1], self.n_labels_,
            groups=groups, window=self.window, stride=self.stride,
            max_scales=self.max_scales, depth=self.depth,
            attn_dim=self.attn_dim, proj_dim=self.proj_dim,
            max_order=self.max_order, gamma=self.gamma, tau=self.tau,
            threshold_mode=self.threshold_mode,
            walk_attention=self.walk_attention, heads=self.heads,
            fusion_dim=self.fusion_dim, nms_radius=self.nms_radius)
        tcfg = tr.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            ema_decay=self.ema_decay, patience=self.patience,
            seed=self.random_state)

        n = feats.shape[0]
        n_val = int(round(self.val_fraction * n))
        perm = np.random.default_rng(self.random_state).permutation(n)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        if train_idx.size == 0:
            train_idx, val_idx = perm, perm[:0]
        train_data = tr.ArrayDataset(grid, feats[train_idx], labels[train_idx])
        val_data = (tr.ArrayDataset(grid, feats[val_idx], labels[val_idx])
                    if val_idx.size else None)
        result = tr.train(cfg, tcfg, train_data, val_data)
        self.config_ = result.cfg
        self.params_ = result.ema_params
        self.history_ = result.history
        self.model_ = PanCANModel(result.cfg, params=result.ema_params)
        return self

    def decision_function(self, X):
        self._require_fitted()
        feats = check_feature_array(X, self._grid().n_cells)
        if feats.shape[1] != self.visual_dim_:
            raise ValueError(
                f"expected {self.visual_dim_} feature rows, got {feats.shape[1]}")
        feats = self._with_positions(feats)
        data = tr.ArrayDataset(self._grid(), feats,
                               np.ones((feats.shape[0], self.n_labels_),
                                       dtype=np.int64))
        scores = tr.model_scores(self.model_, data)
        with np.errstate(divide="ignore"):
            return np.log(scores / (1.0 - scores))

    def predict_proba(self, X):
        self._require_fitted()
        feats = check_feature_array(X, self._grid().n_cells)
        if feats.shape[1] != self.visual_dim_:
            raise ValueError(
                f"expected {self.visual_dim_} feature rows, got {feats.shape[1]}")
        feats = self._with_positions(feats)
        data = tr.ArrayDataset(self._grid(), feats,
                               np.ones((feats.shape[0], self.n_labels_),
                                       dtype=np.int64))
        return tr.model_scores(self.model_, data)

    def predict(self, X):
        return (self.predict_proba(X) >= 0.5).astype(np.int64)
