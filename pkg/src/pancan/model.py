"""End-to-end assembly: per-scale context stacks cascaded through cross-scale
fusion, image-level aggregation, multi-head fusion with a global token, and
the grouped classification head.

``PanCANModel`` owns the configuration, the derived grid structure
(neighborhood rings, macro maps), and the learnable parameters.  The
batched forward works on a d x (B*n) feature Mat; single-sample helpers
wrap it for ``CellFeatures``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import numeric as nm
from .crossscale import CscamnParams, build_macro_map, cscamn_batched, init_cscamn_params
from .errors import ConfigError, FormatError
from .grids import CellFeatures, GridSpec, ScalePyramid, build_pyramid
from .multiorder import (MocamnLayerParams, init_layer_params,
                         member_tables, mocamn_stack_batched)
from .neighborhoods import build_adjacency_set, order_k
from .numeric import Mat

CKPT_MAGIC = b"PANCAN-CKPT v1\n"


@dataclass(frozen=True)
class ModelConfig:
    """Everything that fixes the network's shape and non-learned behavior."""

    pyramid: ScalePyramid
    input_dim: int
    n_labels: int
    orders: tuple[tuple[int, ...], ...]
    depth: tuple[int, ...]
    attn_dim: tuple[int, ...]
    proj_dim: tuple[int, ...]
    cs_dim: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]
    group_weights: tuple[float, ...] | None = None
    gamma: float = 0.5
    tau: float = 0.71
    threshold_mode: str = "ratio"
    walk_attention: bool = True
    heads: int = 4
    fusion_dim: int = 32
    nms_radius: int = 1

    @property
    def n_scales(self):
        return self.pyramid.n_scales

    def scale_input_dim(self, s: int) -> int:
        return self.input_dim if s == 0 else self.cs_dim[s - 1]

    def validate(self):
        S = self.n_scales
        for name, seq, want in (("orders", self.orders, S),
                                ("depth", self.depth, S),
                                ("attn_dim", self.attn_dim, S),
                                ("proj_dim", self.proj_dim, S),
                                ("cs_dim", self.cs_dim, max(S - 1, 0))):
            if len(seq) != want:
                raise ConfigError(f"{name} needs {want} entries, got {len(seq)}")
        if self.input_dim < 1 or self.n_labels < 1:
            raise ConfigError("input_dim and n_labels must be positive")
        for per_scale in self.orders:
            if not per_scale or any(k < 1 for k in per_scale):
                raise ConfigError(f"invalid order list {per_scale}")
        if any(t < 1 for t in self.depth):
            raise ConfigError("every scale needs depth >= 1")
        if min(self.attn_dim) < 1 or min(self.proj_dim) < 1:
            raise ConfigError("attention and projection dims must be positive")
        if self.cs_dim and min(self.cs_dim) < 1:
            raise ConfigError("cross-scale dims must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.threshold_mode not in ("ratio", "literal"):
            raise ConfigError(f"unknown threshold mode {self.threshold_mode!r}")
        if self.heads < 1 or self.fusion_dim % self.heads != 0:
            raise ConfigError(
                f"fusion dim {self.fusion_dim} not divisible by {self.heads} heads")
        flat = sorted(l for g in self.groups for l in g)
        if flat != list(range(self.n_labels)):
            raise ConfigError("groups must partition the label set")
        if self.group_weights is not None:
            if len(self.group_weights) != len(self.groups):
                raise ConfigError("one loss weight per group required")
            if any(w <= 0 for w in self.group_weights):
                raise ConfigError("group loss weights must be positive")
        if self.nms_radius < 0:
            raise ConfigError("nms_radius must be >= 0")

    def weights_or_ones(self):
        if self.group_weights is None:
            return tuple(1.0 for _ in self.groups)
        return self.group_weights


def default_config(grid_rows: int, grid_cols: int, input_dim: int,
                   n_labels: int, *, groups=None, window=2, stride=2,
                   max_scales=None, depth=2, attn_dim=8, proj_dim=16,
                   cs_dim=None, max_order=2, fine_scales_with_high_orders=2,
                   **overrides) -> ModelConfig:
    """Config with the reference hierarchy and per-scale order defaults.

    Higher orders are used on the finest scales only; coarser scales fall
    back to first-order context.  Scalar dims broadcast across scales.
    """
    pyramid = build_pyramid(GridSpec.cells(grid_rows, grid_cols),
                            window=window, stride=stride, max_scales=max_scales)
    S = pyramid.n_scales
    orders = tuple(
        tuple(range(1, max_order + 1)) if s < fine_scales_with_high_orders
        else (1,)
        for s in range(S))
    if groups is None:
        groups = (tuple(range(n_labels)),)
    depth_t = tuple(depth if isinstance(depth, int) else depth[s] for s in range(S))
    attn_t = tuple(attn_dim if isinstance(attn_dim, int) else attn_dim[s]
                   for s in range(S))
    proj_t = tuple(proj_dim if isinstance(proj_dim, int) else proj_dim[s]
                   for s in range(S))
    if cs_dim is None:
        cs_dim = proj_dim if isinstance(proj_dim, int) else proj_dim[0]
    cs_t = tuple(cs_dim if isinstance(cs_dim, int) else cs_dim[s]
                 for s in range(max(S - 1, 0)))
    cfg = ModelConfig(pyramid=pyramid, input_dim=input_dim, n_labels=n_labels,
                      orders=orders, depth=depth_t, attn_dim=attn_t,
                      proj_dim=proj_t, cs_dim=cs_t,
                      groups=tuple(tuple(g) for g in groups), **overrides)
    cfg.validate()
    return cfg


@dataclass
class MhaParams:
    w_q: Mat
    w_k: Mat
    w_v: Mat
    w_o: Mat


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray


class PanCANParams:
    """All learnable tensors, enumerable as a stable flat list."""

    def __init__(self, layers, transitions, token_proj, global_proj, mha,
                 head_w, head_b):
        self.layers: list[list[MocamnLayerParams]] = layers
        self.transitions: list[CscamnParams] = transitions
        self.token_proj: list[Mat] = token_proj
        self.global_proj: Mat = global_proj
        self.mha: MhaParams = mha
        self.head_w: list[Mat] = head_w
        self.head_b: list[Mat] = head_b

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0,
             structure: "ModelStructure" = None) -> "PanCANParams":
        cfg.validate()
        if structure is None:
            structure = ModelStructure(cfg)
        rng = np.random.default_rng(seed)
        layers = []
        for s in range(cfg.n_scales):
            d_in = cfg.scale_input_dim(s)
            per_scale = []
            for t in range(cfg.depth[s]):
                layer_in = d_in if t == 0 else cfg.proj_dim[s]
                per_scale.append(init_layer_params(
                    rng, structure.adj_masks[s], list(cfg.orders[s]), layer_in,
                    d_in, cfg.attn_dim[s], cfg.proj_dim[s], cfg.gamma, cfg.tau,
                    scale_index=s, layer_index=t))
            layers.append(per_scale)
        transitions = [
            init_cscamn_params(rng, cfg.proj_dim[s], cfg.cs_dim[s],
                               cfg.nms_radius)
            for s in range(cfg.n_scales - 1)]
        token_proj = [
            Mat.randn(rng, cfg.fusion_dim, cfg.proj_dim[s],
                      1.0 / math.sqrt(cfg.proj_dim[s]))
            for s in range(cfg.n_scales)]
        global_proj = Mat.randn(rng, cfg.fusion_dim, cfg.input_dim,
                                1.0 / math.sqrt(cfg.input_dim))
        f = cfg.fusion_dim
        mha = MhaParams(*(Mat.randn(rng, f, f, 1.0 / math.sqrt(f))
                          for _ in range(4)))
        head_w = [Mat.randn(rng, len(g), f, 1.0 / math.sqrt(f))
                  for g in cfg.groups]
        head_b = [Mat.zeros(len(g), 1) for g in cfg.groups]
        return cls(layers, transitions, token_proj, global_proj, mha,
                   head_w, head_b)

    def _slots(self):
        """Stable (name, owner, attribute-or-index) enumeration."""
        out = []
        for s, per_scale in enumerate(self.layers):
            for t, lp in enumerate(per_scale):
                for c, per_c in enumerate(lp.orders):
                    for op in per_c:
                        base = f"scale{s}/layer{t}/c{c}/k{op.order}"
                        out.append((f"{base}/wq", op, "w_q"))
                        out.append((f"{base}/wm", op, "w_m"))
                        out.append((f"{base}/wv", op, "w_v"))
                for c, la in enumerate(lp.adjacency):
                    out.append((f"scale{s}/layer{t}/adj{c}", la, "weights"))
                out.append((f"scale{s}/layer{t}/proj_w", lp, "proj_w"))
                out.append((f"scale{s}/layer{t}/proj_b", lp, "proj_b"))
        for s, tp in enumerate(self.transitions):
            base = f"transition{s}"
            for attr in ("w_q", "w_m", "w_v", "proj_w", "proj_b"):
                out.append((f"{base}/{attr}", tp, attr))
        for s in range(len(self.token_proj)):
            out.append((f"token_proj{s}", self.token_proj, s))
        out.append(("global_proj", self, "global_proj"))
        for attr in ("w_q", "w_k", "w_v", "w_o"):
            out.append((f"mha/{attr}", self.mha, attr))
        for g in range(len(self.head_w)):
            out.append((f"head{g}/w", self.head_w, g))
            out.append((f"head{g}/b", self.head_b, g))
        return out

    def named_parameters(self) -> list[tuple[str, Mat]]:
        out = []
        for name, owner, key in self._slots():
            val = owner[key] if isinstance(key, int) else getattr(owner, key)
            out.append((name, val))
        return out

    def parameters(self) -> list[Mat]:
        return [m for _, m in self.named_parameters()]

    def set_parameters(self, values: dict[str, Mat]) -> None:
        for name, owner, key in self._slots():
            if name not in values:
                continue
            if isinstance(key, int):
                owner[key] = values[name]
            else:
                setattr(owner, key, values[name])

    def n_entries(self):
        return sum(m.data.size for _, m in self.named_parameters())


class ModelStructure:
    """Grids, neighborhood rings, and macro maps derived from the config."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.grids = list(cfg.pyramid.scales)
        self.adj_sets = [build_adjacency_set(g) for g in self.grids]
        self.adj_masks = [a.masks for a in self.adj_sets]
        self.nbhds = [
            {k: order_k(self.adj_sets[s], k) for k in cfg.orders[s]}
            for s in range(cfg.n_scales)]
        self.member_tables = [member_tables(self.nbhds[s])
                              for s in range(cfg.n_scales)]
        self.macro_maps = [
            build_macro_map(self.grids[s], self.grids[s + 1],
                            cfg.pyramid.window, cfg.pyramid.stride)
            for s in range(cfg.n_scales - 1)]

    def n_cells(self, s):
        return self.grids[s].n_cells


def _sum_pool(b, n):
    return Mat._wrap(np.kron(np.eye(b), np.ones((n, 1))))


def _mean_pool(b, n):
    return Mat._wrap(np.kron(np.eye(b), np.full((n, 1), 1.0 / n)))


def _interleave_perm(b, m):
    # tokens arrive scale-major (token i of sample b at column i*b + b);
    # forward wants sample-major blocks of m tokens
    return np.array([i * b + bb for bb in range(b) for i in range(m)],
                    dtype=np.intp)


def multihead_attention(tokens: Mat, m: int, heads: int, p: MhaParams,
                        active: np.ndarray) -> Mat:
    """Scaled dot-product attention over per-sample token blocks, mean-pooled.

    ``tokens`` is fusion x (B*m); ``active`` marks which of the m token
    positions participate.  Inactive tokens are excluded from attention keys
    and from the pooled mean, so the result matches a model built without
    them.
    """
    f = tokens.rows
    if f % heads != 0:
        raise ConfigError(f"token dim {f} not divisible by {heads} heads")
    if active.shape != (m,) or not active.any():
        raise ConfigError("active mask must keep at least one token")
    b = tokens.cols // m
    hd = f // heads
    q = nm.matmul(p.w_q, tokens)
    k = nm.matmul(p.w_k, tokens)
    v = nm.matmul(p.w_v, tokens)
    pair = np.outer(active, active)
    mask = np.tile(pair, (b, 1))
    outs = []
    for h in range(heads):
        rows = np.arange(h * hd, (h + 1) * hd, dtype=np.intp)
        qh, kh, vh = (nm.gather_rows(x, rows) for x in (q, k, v))
        scores = nm.scale(nm.sample_scores(qh, kh, m, m), 1.0 / math.sqrt(hd))
        probs = nm.masked_softmax_rows(scores, mask)
        outs.append(nm.sample_aggregate(vh, probs, m, m))
    mixed = nm.matmul(p.w_o, nm.concat_rows(outs))
    n_active = int(active.sum())
    pool = np.kron(np.eye(b), (active / n_active).reshape(-1, 1))
    return nm.matmul(mixed, Mat._wrap(pool))


def multihead_fuse(tokens, p: MhaParams, heads: int) -> np.ndarray:
    """Fuse a list of equal-length vectors into one (single-sample wrapper)."""
    cols = [np.asarray(t, dtype=np.float64).reshape(-1, 1) for t in tokens]
    stacked = Mat(np.concatenate(cols, axis=1))
    m = len(cols)
    out = multihead_attention(stacked, m, heads, p, np.ones(m, dtype=bool))
    return out.data[:, 0]


class PanCANModel:
    """Config + structure + parameters with the batched forward pass."""

    def __init__(self, cfg: ModelConfig, params: PanCANParams | None = None,
                 seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.structure = ModelStructure(cfg)
        self.params = params if params is not None else PanCANParams.init(
            cfg, seed, self.structure)
        order = [l for g in cfg.groups for l in g]
        self._label_unpermute = np.argsort(np.array(order, dtype=np.intp))

    # -- forward ----------------------------------------------------------

    def forward_batch(self, x: Mat, n_samples: int, recorder=None,
                      drop_scales: frozenset = frozenset()) -> Mat:
        cfg, st = self.cfg, self.structure
        n1 = st.n_cells(0)
        if x.rows != cfg.input_dim or x.cols != n_samples * n1:
            raise ConfigError(
                f"input block {x.shape} does not match dim {cfg.input_dim} "
                f"x {n_samples} samples x {n1} cells")
        tokens = []
        feats = x
        for s in range(cfg.n_scales):
            n_s = st.n_cells(s)
            rec = None
            if recorder is not None:
                rec = recorder.setdefault(("mocamn", s), {})
            out = mocamn_stack_batched(
                feats, self.params.layers[s], st.nbhds[s], n_s,
                threshold_mode=cfg.threshold_mode,
                attention=cfg.walk_attention, recorder=rec,
                tables=st.member_tables[s])
            img = nm.matmul(out, _sum_pool(n_samples, n_s))
            tokens.append(nm.matmul(self.params.token_proj[s], img))
            if s < cfg.n_scales - 1:
                feats = cscamn_batched(out, st.macro_maps[s],
                                       self.params.transitions[s],
                                       recorder=recorder, key=("cscamn", s))
        global_token = nm.matmul(self.params.global_proj,
                                 nm.matmul(x, _mean_pool(n_samples, n1)))
        tokens.append(global_token)
        m = len(tokens)
        if recorder is not None:
            recorder[("tokens",)] = [np.array(t.data) for t in tokens]
        stacked = nm.concat_cols(tokens)
        inter = nm.gather_cols(stacked, _interleave_perm(n_samples, m))
        active = np.ones(m, dtype=bool)
        for s in drop_scales:
            active[s] = False
        fused = multihead_attention(inter, m, cfg.heads, self.params.mha, active)
        parts = [nm.add_col(nm.matmul(self.params.head_w[g], fused),
                            self.params.head_b[g])
                 for g in range(len(cfg.groups))]
        grouped = nm.concat_rows(parts)
        return nm.gather_rows(grouped, self._label_unpermute)

    def forward(self, cf: CellFeatures, recorder=None,
                drop_scales: frozenset = frozenset()) -> Prediction:
        grid = self.structure.grids[0]
        if (cf.grid.n_rows, cf.grid.n_cols) != (grid.n_rows, grid.n_cols):
            raise ConfigError(
                f"features on {cf.grid.n_rows}x{cf.grid.n_cols} cells, model "
                f"expects {grid.n_rows}x{grid.n_cols}")
        if cf.dim != self.cfg.input_dim:
            raise ConfigError(
                f"feature dim {cf.dim} != configured {self.cfg.input_dim}")
        with nm.no_grad():
            logits = self.forward_batch(Mat(cf.feats), 1, recorder=recorder,
                                        drop_scales=drop_scales)
        z = logits.data[:, 0]
        return Prediction(np.array(z), _stable_sigmoid(z))

    # -- loss -------------------------------------------------------------

    def loss_batch(self, logits: Mat, labels: np.ndarray) -> Mat:
        """Grouped objective: sum_g (||W_g||^2 / 2 + C_g * sum BCE)."""
        labels = np.asarray(labels)
        if labels.shape != logits.shape:
            raise ValueError(f"labels {labels.shape} vs logits {logits.shape}")
        if not np.all(np.isin(labels, (-1, 1))):
            raise ValueError("labels must be -1 or +1")
        y01 = (labels.astype(np.float64) + 1.0) / 2.0
        weights = self.cfg.weights_or_ones()
        total = None
        for g, idx in enumerate(self.cfg.groups):
            idx = np.asarray(idx, dtype=np.intp)
            bce = nm.bce_logits_sum(nm.gather_rows(logits, idx), y01[idx, :])
            term = nm.add(nm.scale(bce, weights[g]),
                          nm.scale(nm.frobenius_sq(self.params.head_w[g]), 0.5))
            total = term if total is None else nm.add(total, term)
        return total

    def grouped_loss(self, pred: Prediction, labels: np.ndarray) -> float:
        labels = np.asarray(labels).reshape(-1, 1)
        logits = Mat(pred.logits.reshape(-1, 1))
        return self.loss_batch(logits, labels).item()

    def global_feature(self, cf: CellFeatures) -> np.ndarray:
        """Mean input cell feature, projected to the fusion width."""
        with nm.no_grad():
            out = nm.matmul(self.params.global_proj,
                            nm.mean_cols(Mat(cf.feats)))
        return out.data[:, 0]


def _stable_sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def group_labels(cooccurrence: np.ndarray, n_groups: int) -> tuple[tuple[int, ...], ...]:
    """Greedy agglomerative label grouping by co-occurrence mass.

    Starts from singletons and repeatedly merges the pair of groups with the
    largest summed cross co-occurrence until n_groups remain; every tie
    breaks toward the lowest label indices.  Groups come back sorted.
    """
    co = np.asarray(cooccurrence, dtype=np.float64)
    n = co.shape[0]
    if co.shape != (n, n):
        raise ConfigError("co-occurrence matrix must be square")
    if not 1 <= n_groups <= n:
        raise ConfigError(f"need 1 <= n_groups <= {n}, got {n_groups}")
    clusters: list[list[int]] = [[l] for l in range(n)]
    while len(clusters) > n_groups:
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                score = sum(co[a, b] + co[b, a]
                            for a in clusters[i] for b in clusters[j])
                key = (-score, clusters[i][0], clusters[j][0])
                if best is None or key < best[0]:
                    best = (key, i, j)
        _, i, j = best
        clusters[i] = sorted(clusters[i] + clusters[j])
        del clusters[j]
    clusters.sort(key=lambda c: c[0])
    return tuple(tuple(c) for c in clusters)


def group_weights_from_labels(labels: np.ndarray,
                              groups: tuple[tuple[int, ...], ...]) -> tuple[float, ...]:
    """Inverse positive-frequency loss weight per group (class imbalance)."""
    y = np.asarray(labels)
    n = y.shape[0]
    out = []
    for g in groups:
        pos = float((y[:, list(g)] == 1).sum())
        freq = max(pos, 1.0) / (n * len(g))
        out.append(1.0 / freq)
    return tuple(out)


# ---------------------------------------------------------------------------
# checkpoint format


def _pyramid_to_dict(p: ScalePyramid):
    return {"scales": [[g.height_px, g.width_px, g.n_rows, g.n_cols]
                       for g in p.scales],
            "window": p.window, "stride": p.stride}


def _pyramid_from_dict(d):
    scales = tuple(GridSpec(*row) for row in d["scales"])
    return ScalePyramid(scales, d["window"], d["stride"])


def config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["pyramid"] = _pyramid_to_dict(cfg.pyramid)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["pyramid"] = _pyramid_from_dict(d["pyramid"])
    d["orders"] = tuple(tuple(o) for o in d["orders"])
    for key in ("depth", "attn_dim", "proj_dim", "cs_dim"):
        d[key] = tuple(d[key])
    d["groups"] = tuple(tuple(g) for g in d["groups"])
    if d.get("group_weights") is not None:
        d["group_weights"] = tuple(d["group_weights"])
    cfg = ModelConfig(**d)
    cfg.validate()
    return cfg


def save_checkpoint(path, cfg: ModelConfig, params: PanCANParams) -> None:
    """Versioned binary: magic line, JSON config echo + manifest, raw floats."""
    named = params.named_parameters()
    manifest = [[name, m.rows, m.cols] for name, m in named]
    header = json.dumps({"config": config_to_dict(cfg), "params": manifest})
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        for _, m in named:
            fh.write(np.ascontiguousarray(m.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, PanCANParams]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable checkpoint header: {exc}") from None
        payload = fh.read()
    cfg = config_from_dict(header["config"])
    params = PanCANParams.init(cfg, seed=0)
    want = [(name, m.rows, m.cols) for name, m in params.named_parameters()]
    got = [tuple(row) for row in header["params"]]
    if [(n, r, c) for n, r, c in got] != want:
        raise FormatError(f"{path}: parameter manifest does not match config")
    need = sum(r * c for _, r, c in got) * 8
    if len(payload) != need:
        raise FormatError(
            f"{path}: expected {need} payload bytes, found {len(payload)}")
    values = {}
    offset = 0
    for name, r, c in got:
        count = r * c
        block = np.frombuffer(payload, dtype="<f8", count=count,
                              offset=offset).reshape(r, c)
        offset += count * 8
        values[name] = Mat._wrap(np.array(block))
    params.set_parameters(values)
    return cfg, params
