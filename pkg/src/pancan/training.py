"""Optimization and evaluation: AdamW with decoupled decay, parameter EMA,
warmup+cosine schedule, early stopping on validation mAP, a context-free
pooled baseline, and the ablation harness emitting table-shaped CSVs.

Training is bit-reproducible: all randomness flows from the seeds in the
configs, and evaluation always uses the EMA weights.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace

import numpy as np

from . import numeric as nm
from .errors import ConfigError, EvaluationError
from .grids import GridSpec, positional_encoding
from .metrics import MetricsReport, compute_metrics
from .model import (ModelConfig, PanCANModel, PanCANParams, default_config,
                    group_weights_from_labels)
from .numeric import Mat
from .synth import SplitData


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 6
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    ema_decay: float = 0.9997
    patience: int = 20
    warmup_fraction: float = 0.05
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema decay must lie in (0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup fraction must lie in [0, 1)")


@dataclass
class ArrayDataset:
    """Plain feature/label arrays ready for the model (positions attached)."""

    grid: GridSpec
    features: np.ndarray   # (N, dim, n_cells)
    labels: np.ndarray     # (N, L) in {-1, +1}

    def __post_init__(self):
        if self.features.ndim != 3 or self.labels.ndim != 2:
            raise ConfigError("features must be (N, d, n) and labels (N, L)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConfigError("feature/label sample counts differ")
        if self.features.shape[2] != self.grid.n_cells:
            raise ConfigError("cell count does not match the grid")

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


def from_split(grid: GridSpec, split: SplitData, d_pos: int = 8) -> ArrayDataset:
    """Attach sinusoidal position rows below the per-cell features."""
    feats = split.features
    if d_pos > 0:
        pe = positional_encoding(grid, d_pos)
        tiled = np.broadcast_to(pe, (feats.shape[0],) + pe.shape)
        feats = np.concatenate([feats, tiled], axis=1)
    return ArrayDataset(grid, np.ascontiguousarray(feats), split.labels)


def batch_columns(features: np.ndarray, idx) -> np.ndarray:
    """Stack the selected samples side-by-side as d x (B*n) columns."""
    block = features[idx]
    b, d, n = block.shape
    return block.transpose(1, 0, 2).reshape(d, b * n)


# ---------------------------------------------------------------------------
# optimizer and EMA


class AdamWState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adamw_step(params, grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, weight_decay: float, betas=(0.9, 0.999),
               eps: float = 1e-8) -> None:
    """One decoupled-weight-decay adaptive step with bias correction.

    ``params`` is anything exposing named_parameters/set_parameters.
    Rejects the whole step when any gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise EvaluationError(f"non-finite gradient for {name}; step rejected")
    state.step += 1
    t = state.step
    b1, b2 = betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    updates = {}
    for name, mat in params.named_parameters():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step_dir = (m / c1) / (np.sqrt(v / c2) + eps)
        new = mat.data * (1.0 - lr * weight_decay) - lr * step_dir
        updates[name] = Mat._wrap(new)
    params.set_parameters(updates)


def ema_init(params: PanCANParams) -> dict[str, np.ndarray]:
    return {name: np.array(m.data) for name, m in params.named_parameters()}


def ema_update(shadow: dict[str, np.ndarray], params: PanCANParams,
               decay: float) -> dict[str, np.ndarray]:
    """shadow' = decay * shadow + (1 - decay) * params, in place."""
    for name, m in params.named_parameters():
        shadow[name] = decay * shadow[name] + (1.0 - decay) * m.data
    return shadow


def params_from_values(cfg: ModelConfig,
                       values: dict[str, np.ndarray]) -> PanCANParams:
    params = PanCANParams.init(cfg, seed=0)
    params.set_parameters({k: Mat._wrap(np.array(v)) for k, v in values.items()})
    return params


def lr_at(step: int, total_steps: int, peak: float,
          warmup_fraction: float = 0.05) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    warm = max(1, int(round(warmup_fraction * total_steps)))
    if step < warm:
        return peak * (step + 1) / warm
    span = max(1, total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    cfg: ModelConfig
    final_params: PanCANParams
    ema_params: PanCANParams
    history: list[dict]
    best_epoch: int


def model_scores(model: PanCANModel, data: ArrayDataset,
                chunk: int = 64) -> np.ndarray:
    n = data.n_samples
    out = np.empty((n, model.cfg.n_labels))
    with nm.no_grad():
        for start in range(0, n, chunk):
            idx = np.arange(start, min(start + chunk, n))
            x = Mat._wrap(batch_columns(data.features, idx))
            logits = model.forward_batch(x, idx.size).data
            out[idx] = _sigmoid_np(logits.T)
    return out


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def evaluate(cfg: ModelConfig, params: PanCANParams, data: ArrayDataset,
             topk: int | None = None) -> MetricsReport:
    model = PanCANModel(cfg, params=params)
    scores = model_scores(model, data)
    return compute_metrics(scores, data.labels, topk=topk)


def train(cfg: ModelConfig, tcfg: TrainConfig, train_data: ArrayDataset,
          val_data: ArrayDataset | None = None, on_epoch=None) -> TrainResult:
    """Minibatch AdamW with EMA shadowing and mAP-based early stopping.

    The checkpointed weights are the EMA shadow at the best validation
    epoch (or the final shadow when no validation split is given).
    """
    tcfg.validate()
    if cfg.group_weights is None:
        cfg = replace(cfg, group_weights=group_weights_from_labels(
            train_data.labels, cfg.groups))
    if train_data.dim != cfg.input_dim:
        raise ConfigError(
            f"training features have dim {train_data.dim}, model expects "
            f"{cfg.input_dim}")
    model = PanCANModel(cfg, seed=tcfg.seed)
    state = AdamWState()
    shadow = ema_init(model.params)
    rng = np.random.default_rng(tcfg.seed)
    n = train_data.n_samples
    steps_per_epoch = max(1, math.ceil(n / tcfg.batch_size))
    total_steps = steps_per_epoch * tcfg.epochs
    history = []
    best_map = -1.0
    best_epoch = -1
    best_shadow = None
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        cur_lr = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            x = Mat._wrap(batch_columns(train_data.features, idx))
            labels = train_data.labels[idx].T
            logits = model.forward_batch(x, idx.size)
            loss = model.loss_batch(logits, labels)
            names = [nm_ for nm_, _ in model.params.named_parameters()]
            leaves = [m for _, m in model.params.named_parameters()]
            grads = nm.gradients(loss, leaves)
            cur_lr = lr_at(step, total_steps, tcfg.learning_rate,
                           tcfg.warmup_fraction)
            adamw_step(model.params, dict(zip(names, grads)), state, cur_lr,
                       tcfg.weight_decay)
            ema_update(shadow, model.params, tcfg.ema_decay)
            epoch_loss += loss.item()
            step += 1
        entry = {"epoch": epoch, "loss": epoch_loss / n, "lr": cur_lr}
        if val_data is not None:
            ema_params = params_from_values(cfg, shadow)
            entry["val_mAP"] = evaluate(cfg, ema_params, val_data).map
            if entry["val_mAP"] > best_map:
                best_map = entry["val_mAP"]
                best_epoch = epoch
                best_shadow = copy.deepcopy(shadow)
        history.append(entry)
        if on_epoch is not None:
            on_epoch(epoch, cfg, params_from_values(cfg, shadow))
        if val_data is not None and epoch - best_epoch >= tcfg.patience:
            break
    if best_shadow is None:
        best_shadow = shadow
        best_epoch = len(history) - 1
    return TrainResult(cfg, model.params, params_from_values(cfg, best_shadow),
                       history, best_epoch)


# ---------------------------------------------------------------------------
# context-free baseline: the same grouped head on mean-pooled cell features


@dataclass
class PooledBaseline:
    groups: tuple[tuple[int, ...], ...]
    group_weights: tuple[float, ...]
    head_w: list[Mat]
    head_b: list[Mat]
    label_unpermute: np.ndarray

    def scores(self, data: ArrayDataset) -> np.ndarray:
        pooled = data.features.mean(axis=2)  # (N, d)
        parts = []
        for g in range(len(self.groups)):
            parts.append(self.head_w[g].data @ pooled.T
                         + self.head_b[g].data)
        logits = np.concatenate(parts, axis=0)[self.label_unpermute]
        return _sigmoid_np(logits.T)


class DictParams:
    """Minimal named-parameter holder so adamw_step applies to flat dicts."""

    def __init__(self, values: dict[str, Mat]):
        self.values = values

    def named_parameters(self):
        return list(self.values.items())

    def set_parameters(self, updates):
        self.values.update(updates)


def train_pooled_baseline(groups, train_data: ArrayDataset,
                          tcfg: TrainConfig,
                          group_weights=None) -> PooledBaseline:
    if group_weights is None:
        group_weights = group_weights_from_labels(train_data.labels, groups)
    rng = np.random.default_rng(tcfg.seed)
    d = train_data.dim
    holder = DictParams({})
    for g, lab_idx in enumerate(groups):
        holder.values[f"w{g}"] = Mat.randn(rng, len(lab_idx), d, 1.0 / math.sqrt(d))
        holder.values[f"b{g}"] = Mat.zeros(len(lab_idx), 1)
    order = [l for g in groups for l in g]
    unperm = np.argsort(np.array(order, dtype=np.intp))
    state = AdamWState()
    n = train_data.n_samples
    total = max(1, math.ceil(n / tcfg.batch_size)) * tcfg.epochs
    pooled = train_data.features.mean(axis=2)
    step = 0
    for _ in range(tcfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, tcfg.batch_size):
            idx = perm[start:start + tcfg.batch_size]
            x = Mat._wrap(pooled[idx].T)
            y01 = (train_data.labels[idx].T + 1.0) / 2.0
            total_loss = None
            for g, lab_idx in enumerate(groups):
                logits_g = nm.add_col(nm.matmul(holder.values[f"w{g}"], x),
                                      holder.values[f"b{g}"])
                bce = nm.bce_logits_sum(logits_g, y01[list(lab_idx), :])
                term = nm.add(nm.scale(bce, group_weights[g]),
                              nm.scale(nm.frobenius_sq(holder.values[f"w{g}"]), 0.5))
                total_loss = term if total_loss is None else nm.add(total_loss, term)
            names = [name for name, _ in holder.named_parameters()]
            leaves = [m for _, m in holder.named_parameters()]
            grads = nm.gradients(total_loss, leaves)
            lr = lr_at(step, total, tcfg.learning_rate, tcfg.warmup_fraction)
            adamw_step(holder, dict(zip(names, grads)), state, lr,
                       tcfg.weight_decay)
            step += 1
    head_w = [holder.values[f"w{g}"] for g in range(len(groups))]
    head_b = [holder.values[f"b{g}"] for g in range(len(groups))]
    return PooledBaseline(tuple(tuple(g) for g in groups),
                          tuple(group_weights), head_w, head_b, unperm)


# ---------------------------------------------------------------------------
# ablation harness


AXIS_HEADERS = {
    "order": "Neighborhood Order",
    "depth": "Layer Number",
    "threshold": "Threshold Value",
    "interval": "Scale interval",
    "module": "Configuration",
}

_ORDINALS = {1: "First-Order", 2: "Second-Order", 3: "Third-Order"}
_DEPTH_NAMES = {1: "One-Layer", 2: "Two-Layer", 3: "Three-Layer"}

MODULE_ROWS = ("full", "multi-order", "cross-scale", "grouped-fc", "random-walk")


def _module_label(value):
    if value == "full":
        return "PanCAN"
    names = {"multi-order": "Multi-order", "cross-scale": "Cross-scale",
             "grouped-fc": "Grouped FC", "random-walk": "Random walk"}
    return f"PanCAN without {names[value]}"


def ablation_config(axis: str, value, base: ModelConfig) -> tuple[str, ModelConfig]:
    """Row label and config variant for one ablation cell."""
    S = base.n_scales
    if axis == "order":
        k = int(value)
        orders = tuple(tuple(range(1, k + 1)) if len(base.orders[s]) > 1 or s < 2
                       else base.orders[s] for s in range(S))
        return _ORDINALS.get(k, f"{k}-Order"), replace(base, orders=orders)
    if axis == "depth":
        t = int(value)
        return (_DEPTH_NAMES.get(t, f"{t}-Layer"),
                replace(base, depth=tuple(t for _ in range(S))))
    if axis == "threshold":
        if value is None:
            return "none", replace(base, tau=0.0)
        return f"{float(value):g}", replace(base, tau=float(value))
    if axis == "interval":
        w = int(value)
        grid = base.pyramid.scales[0]
        cfg = default_config(
            grid.n_rows, grid.n_cols, base.input_dim, base.n_labels,
            groups=base.groups, window=w, stride=w,
            max_scales=S if w == 1 else None,
            depth=base.depth[0], attn_dim=base.attn_dim[0],
            proj_dim=base.proj_dim[0],
            cs_dim=base.cs_dim[0] if base.cs_dim else base.proj_dim[0],
            gamma=base.gamma, tau=base.tau, heads=base.heads,
            fusion_dim=base.fusion_dim, group_weights=base.group_weights,
            threshold_mode=base.threshold_mode, nms_radius=base.nms_radius)
        return f"{w}x{w}", cfg
    if axis == "module":
        label = _module_label(value)
        if value == "full":
            return label, base
        if value == "multi-order":
            return label, replace(base, orders=tuple((1,) for _ in range(S)))
        if value == "cross-scale":
            grid = base.pyramid.scales[0]
            cfg = default_config(
                grid.n_rows, grid.n_cols, base.input_dim, base.n_labels,
                groups=base.groups, window=base.pyramid.window,
                stride=base.pyramid.stride, max_scales=1,
                depth=base.depth[0], attn_dim=base.attn_dim[0],
                proj_dim=base.proj_dim[0], cs_dim=None,
                gamma=base.gamma, tau=base.tau, heads=base.heads,
                fusion_dim=base.fusion_dim, group_weights=base.group_weights,
                threshold_mode=base.threshold_mode, nms_radius=base.nms_radius)
            return label, cfg
        if value == "grouped-fc":
            return label, replace(
                base, groups=(tuple(range(base.n_labels)),),
                group_weights=(1.0,))
        if value == "random-walk":
            return label, replace(base, walk_attention=False)
        raise ConfigError(f"unknown module ablation {value!r}")
    raise ConfigError(f"unknown ablation axis {axis!r}")


@dataclass
class AblationTable:
    axis: str
    rows: list[tuple[str, MetricsReport]]

    def header(self):
        return [AXIS_HEADERS[self.axis], "mAP", "CF1", "OF1"]

    def to_csv_text(self) -> str:
        lines = [",".join(self.header())]
        for label, rep in self.rows:
            lines.append(f"{label},{rep.map:.1f},{rep.cf1:.1f},{rep.of1:.1f}")
        return "\n".join(lines) + "\n"

    def to_json_rows(self):
        return [{"label": label, **rep.as_dict()} for label, rep in self.rows]


def run_ablation(axis: str, values, base_cfg: ModelConfig, tcfg: TrainConfig,
                 train_data: ArrayDataset, val_data: ArrayDataset | None,
                 test_data: ArrayDataset) -> AblationTable:
    """Retrain per value with the same seed and report test metrics."""
    if axis not in AXIS_HEADERS:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    rows = []
    for value in values:
        label, cfg = ablation_config(axis, value, base_cfg)
        result = train(cfg, tcfg, train_data, val_data)
        rows.append((label, evaluate(result.cfg, result.ema_params, test_data)))
    return AblationTable(axis, rows)
