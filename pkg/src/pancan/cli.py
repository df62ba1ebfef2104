"""Command-line entry point: training, evaluation, fixed-point verification,
ablation tables, and context-weight exports.

Model structure lives in an INI-style config file with [model], [train],
[data], and [output] sections; flags carry only run-level switches.  Every
command is deterministic given its seeds, prints a one-line diagnostic on
stderr and exits nonzero on failure, and mirrors tabular output as JSON.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import kernels as kr
from . import numeric as nm
from . import synth
from . import training as tr
from .errors import ConfigError, PancanError
from .grids import CellFeatures, GridSpec, load_features, save_features
from .model import (PanCANModel, default_config, group_labels,
                    load_checkpoint, save_checkpoint)
from .validation import cooccurrence_counts
from .visualize import (context_influence, scale_influence, weights_to_gray,
                        write_csv_matrix, write_pgm)

_SECTION_KEYS = {
    "model": {"grid_rows", "grid_cols", "window", "stride", "max_scales",
              "depth", "attn_dim", "proj_dim", "fusion_dim", "heads",
              "max_order", "gamma", "tau", "threshold_mode", "walk_attention",
              "n_groups", "nms_radius", "d_pos"},
    "train": {"epochs", "batch", "lr", "weight_decay", "ema_decay",
              "patience", "warmup_fraction", "seed"},
    "data": {"source", "n_samples", "n_labels", "noise", "split", "seed",
             "dir", "labels"},
    "output": {"dir", "checkpoint", "log", "snapshot_every"},
}


def load_run_config(path) -> dict:
    """Parse and whitelist-check the run config; unknown keys are fatal."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser()
    parser.read(path)
    out: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        allowed = _SECTION_KEYS[section]
        out[section] = {}
        for key, value in parser.items(section):
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            out[section][key] = value
    for section in _SECTION_KEYS:
        out.setdefault(section, {})
    return out


def _get(sec, key, cast, default):
    raw = sec.get(key)
    if raw is None or raw == "":
        return default
    if cast is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean {raw!r} for {key}")
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} for {key}") from None


def _train_config(sec, seed_override=None) -> tr.TrainConfig:
    seed = _get(sec, "seed", int, 0)
    if seed_override is not None:
        seed = seed_override
    return tr.TrainConfig(
        epochs=_get(sec, "epochs", int, 20),
        batch_size=_get(sec, "batch", int, 6),
        learning_rate=_get(sec, "lr", float, 1e-4),
        weight_decay=_get(sec, "weight_decay", float, 1e-4),
        ema_decay=_get(sec, "ema_decay", float, 0.9997),
        patience=_get(sec, "patience", int, 20),
        warmup_fraction=_get(sec, "warmup_fraction", float, 0.05),
        seed=seed)


def _split_fractions(sec):
    raw = sec.get("split", "0.7,0.15,0.15")
    parts = [float(p) for p in raw.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"split needs three fractions, got {raw!r}")
    return tuple(parts)


def _load_files_dataset(data_sec):
    root = Path(data_sec.get("dir", ""))
    labels_name = data_sec.get("labels", "labels.csv")
    if not root.is_dir():
        raise ConfigError(f"feature directory {root} does not exist")
    labels_path = root / labels_name
    if not labels_path.is_file():
        raise ConfigError(f"label file {labels_path} does not exist")
    with open(labels_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ConfigError(f"{labels_path}: need a header and at least one row")
    feats, labels = [], []
    grid = None
    for row in rows[1:]:
        cf = load_features(root / row[0])
        if grid is None:
            grid = cf.grid
        elif (cf.grid.n_rows, cf.grid.n_cols) != (grid.n_rows, grid.n_cols):
            raise ConfigError(f"{row[0]}: grid differs from the first file")
        feats.append(cf.feats)
        labels.append([int(v) for v in row[1:]])
    labels = np.asarray(labels)
    if not np.all(np.isin(labels, (-1, 1))):
        raise ConfigError(f"{labels_path}: labels must be -1 or +1")
    return grid, np.stack(feats), labels


def _build_splits(cfg_dict, d_pos):
    """Datasets (train, val, test) with position rows attached."""
    data_sec = cfg_dict["data"]
    model_sec = cfg_dict["model"]
    source = data_sec.get("source", "synth")
    if source == "synth":
        grid = GridSpec.cells(_get(model_sec, "grid_rows", int, 8),
                              _get(model_sec, "grid_cols", int, 10))
        ds = synth.make_synth(
            _get(data_sec, "seed", int, 0),
            _get(data_sec, "n_samples", int, 200),
            grid,
            n_labels=_get(data_sec, "n_labels", int, 4),
            noise=_get(data_sec, "noise", float, 0.25),
            split=_split_fractions(data_sec),
            window=_get(model_sec, "window", int, 2))
        return tuple(tr.from_split(grid, ds.split(name), d_pos=d_pos)
                     for name in ("train", "val", "test"))
    if source == "files":
        grid, feats, labels = _load_files_dataset(data_sec)
        fr = _split_fractions(data_sec)
        n = feats.shape[0]
        n_train = int(round(fr[0] * n))
        n_val = int(round(fr[1] * n))
        out = []
        for a, b in ((0, n_train), (n_train, n_train + n_val),
                     (n_train + n_val, n)):
            part = synth.SplitData(feats[a:b], labels[a:b],
                                   np.zeros((b - a, grid.n_rows, grid.n_cols),
                                            dtype=np.int8))
            out.append(tr.from_split(grid, part, d_pos=d_pos))
        return tuple(out)
    raise ConfigError(f"unknown data source {source!r}")


def _model_config(model_sec, input_dim, n_labels, groups):
    max_scales = model_sec.get("max_scales")
    max_scales = int(max_scales) if max_scales not in (None, "") else None
    return default_config(
        _get(model_sec, "grid_rows", int, 8),
        _get(model_sec, "grid_cols", int, 10),
        input_dim, n_labels, groups=groups,
        window=_get(model_sec, "window", int, 2),
        stride=_get(model_sec, "stride", int, 2),
        max_scales=max_scales,
        depth=_get(model_sec, "depth", int, 2),
        attn_dim=_get(model_sec, "attn_dim", int, 8),
        proj_dim=_get(model_sec, "proj_dim", int, 16),
        max_order=_get(model_sec, "max_order", int, 2),
        gamma=_get(model_sec, "gamma", float, 0.5),
        tau=_get(model_sec, "tau", float, 0.71),
        threshold_mode=model_sec.get("threshold_mode", "ratio"),
        walk_attention=_get(model_sec, "walk_attention", bool, True),
        heads=_get(model_sec, "heads", int, 4),
        fusion_dim=_get(model_sec, "fusion_dim", int, 32),
        nms_radius=_get(model_sec, "nms_radius", int, 1))


def _prepare_run(args, seed_override=None):
    cfg_dict = load_run_config(args.config)
    d_pos = _get(cfg_dict["model"], "d_pos", int, 8)
    train_data, val_data, test_data = _build_splits(cfg_dict, d_pos)
    n_groups = min(_get(cfg_dict["model"], "n_groups", int, 2),
                   train_data.labels.shape[1])
    groups = group_labels(cooccurrence_counts(train_data.labels), n_groups)
    cfg = _model_config(cfg_dict["model"], train_data.dim,
                        train_data.labels.shape[1], groups)
    tcfg = _train_config(cfg_dict["train"], seed_override)
    return cfg_dict, cfg, tcfg, train_data, val_data, test_data


def _out_dir(cfg_dict, flag_value):
    out = Path(flag_value) if flag_value else Path(
        cfg_dict["output"].get("dir", "pancan-run"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg_dict, cfg, tcfg, train_data, val_data, test_data = _prepare_run(
        args, args.seed)
    out = _out_dir(cfg_dict, args.out)
    ckpt_name = cfg_dict["output"].get("checkpoint", "model.ckpt")
    log_name = cfg_dict["output"].get("log", "train-log.jsonl")
    every = _get(cfg_dict["output"], "snapshot_every", int, 0)

    def snapshot(epoch, cfg_now, ema_params):
        if every > 0 and epoch % every == 0:
            save_checkpoint(out / f"epoch-{epoch:03d}.ckpt", cfg_now, ema_params)

    result = tr.train(cfg, tcfg, train_data, val_data, on_epoch=snapshot)
    save_checkpoint(out / ckpt_name, result.cfg, result.ema_params)
    with open(out / log_name, "w", encoding="ascii") as fh:
        for entry in result.history:
            fh.write(json.dumps(entry) + "\n")
    sample_pool = test_data if test_data.n_samples else train_data
    save_features(CellFeatures(0, sample_pool.grid, sample_pool.features[0]),
                  out / "example.feats")
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs "
          f"(best epoch {result.best_epoch}); final loss {last['loss']:.6f}")
    print(f"checkpoint: {out / ckpt_name}")
    print(f"log: {out / log_name}")
    return 0


_METRIC_ORDER = ("mAP", "CP", "CR", "CF1", "OP", "OR", "OF1")


def _print_metrics_table(report, topk):
    names = list(_METRIC_ORDER)
    rows = [("all", [getattr(report, n.lower() if n != "OR" else "or_")
                     for n in ("mAP", "CP", "CR", "CF1", "OP", "OR", "OF1")])]
    if topk and report.topk is not None:
        t = report.topk
        rows.append((f"top-{topk}",
                     [float("nan"), t.cp, t.cr, t.cf1, t.op, t.or_, t.of1]))
    width = 8
    print("scope".ljust(8) + "".join(n.rjust(width) for n in names))
    for scope, vals in rows:
        cells = "".join(
            ("   --".rjust(width) if v != v else f"{v:8.2f}") for v in vals)
        print(scope.ljust(8) + cells)


def cmd_eval(args) -> int:
    cfg, params = load_checkpoint(args.ckpt)
    cfg_dict = load_run_config(args.data)
    d_pos = _get(cfg_dict["model"], "d_pos", int, 8)
    splits = _build_splits(cfg_dict, d_pos)
    data = {"train": splits[0], "val": splits[1], "test": splits[2]}[args.split]
    if data.dim != cfg.input_dim:
        raise ConfigError(
            f"dataset features have dim {data.dim}, checkpoint expects "
            f"{cfg.input_dim}")
    report = tr.evaluate(cfg, params, data, topk=args.topk)
    _print_metrics_table(report, args.topk)
    payload = json.dumps(report.as_dict())
    print(payload)
    if args.json:
        Path(args.json).write_text(payload + "\n", encoding="ascii")
    return 0


def _verify_equivalence(rng, n_max, c_max, t_max, trials):
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, n_max + 1))
        c = int(rng.integers(1, c_max + 1))
        d0 = int(rng.integers(1, 5))
        t = int(rng.integers(0, t_max + 1))
        adj = [rng.standard_normal((n, n)) * (rng.random((n, n)) < 0.5)
               for _ in range(c)]
        phi0 = kr.normalize_columns(rng.standard_normal((d0, n)))
        gamma = kr.default_gamma(adj, safety=0.7)
        s = kr.gram(phi0)
        k = np.array(s)
        for _ in range(t):
            k = kr.iterate(k, s, gamma, adj)
        g = kr.gram(kr.unfold(phi0, gamma, adj, t).top())
        worst = max(worst, float(np.abs(g - k).max() / max(np.abs(k).max(), 1e-30)))
    return worst


def _verify_fixed_point(rng, n_max, c_max, trials, gamma_override):
    worst_resid = 0.0
    worst_margin = -np.inf
    for _ in range(trials):
        n = int(rng.integers(2, n_max + 1))
        c = int(rng.integers(1, c_max + 1))
        adj = [rng.standard_normal((n, n)) * (rng.random((n, n)) < 0.5)
               for _ in range(c)]
        gamma = (gamma_override if gamma_override is not None
                 else kr.default_gamma(adj, safety=0.8))
        d0 = int(rng.integers(1, 5))
        s = kr.gram(kr.normalize_columns(rng.standard_normal((d0, n))))
        res = kr.solve(s, gamma, adj, tol=1e-10)
        worst_resid = max(worst_resid, res.final_residual_inf)
        for ratio in res.residual_ratios():
            worst_margin = max(worst_margin, ratio - res.bound)
    return worst_resid, worst_margin


def _verify_gradients():
    rng = np.random.default_rng(0)
    worst = 0.0
    cases = [
        ("matmul", lambda p: nm.matmul(p[0], p[1]),
         [(3, 4), (4, 2)]),
        ("softmax_rows", lambda p: nm.matmul(nm.softmax_rows(p[0]), p[1]),
         [(3, 4), (4, 2)]),
        ("relu", lambda p: nm.relu(p[0]), [(3, 4)]),
        ("sample_scores", lambda p: nm.sample_scores(p[0], p[1], 2, 3),
         [(3, 4), (3, 6)]),
        ("sample_aggregate", lambda p: nm.sample_aggregate(p[0], p[1], 2, 3),
         [(3, 6), (4, 3)]),
        ("sample_apply", lambda p: nm.sample_apply(p[0], p[1], 3),
         [(2, 6), (3, 3)]),
    ]
    for _, fn, shapes in cases:
        params = [nm.Mat(rng.standard_normal(sh)) for sh in shapes]
        err = nm.grad_check(lambda p: nm.sum_all(fn(p)), params, eps=1e-5)
        worst = max(worst, err)
    return worst


def cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0
    results = {}

    dev = _verify_equivalence(rng, args.n, args.c, args.t, args.trials)
    ok = dev <= 1e-10
    failures += not ok
    results["gram_vs_iterate_max_rel_dev"] = dev
    print(f"[{'PASS' if ok else 'FAIL'}] unfold/iterate equivalence: "
          f"max rel deviation {dev:.3e} (tol 1e-10)")

    resid, margin = _verify_fixed_point(rng, args.n, args.c, args.trials,
                                        args.gamma)
    ok = resid <= 1e-8 and margin <= 1e-6
    failures += not ok
    results["fixed_point_final_residual"] = resid
    results["fixed_point_ratio_margin"] = margin
    print(f"[{'PASS' if ok else 'FAIL'}] fixed point: final residual "
          f"{resid:.3e} (tol 1e-8), ratio margin {margin:.3e} (tol 1e-6)")

    gerr = _verify_gradients()
    ok = gerr <= 1e-6
    failures += not ok
    results["backward_rules_max_rel_err"] = gerr
    print(f"[{'PASS' if ok else 'FAIL'}] backward rules: max rel err "
          f"{gerr:.3e} (tol 1e-6)")

    payload = json.dumps(results)
    print(payload)
    if args.json:
        Path(args.json).write_text(payload + "\n", encoding="ascii")
    return 1 if failures else 0


def _parse_axis_values(axis, raw):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if axis in ("order", "depth", "interval"):
        return [int(p) for p in parts]
    if axis == "threshold":
        return [None if p.lower() in ("none", "x", "all") else float(p)
                for p in parts]
    if axis == "module":
        return parts
    raise ConfigError(f"unknown ablation axis {axis!r}")


def cmd_ablate(args) -> int:
    cfg_dict, cfg, tcfg, train_data, val_data, test_data = _prepare_run(args)
    values = _parse_axis_values(args.axis, args.values)
    table = tr.run_ablation(args.axis, values, cfg, tcfg, train_data,
                            val_data, test_data)
    text = table.to_csv_text()
    out = Path(args.out) if args.out else _out_dir(cfg_dict, None) / \
        f"table-{args.axis}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(json.dumps(table.to_json_rows()))
    print(f"table: {out}")
    return 0


def _load_export_inputs(args):
    cfg, params = load_checkpoint(args.ckpt)
    cf = load_features(args.image_features)
    grid = cfg.pyramid.scales[0]
    if (cf.grid.n_rows, cf.grid.n_cols) != (grid.n_rows, grid.n_cols):
        raise ConfigError(
            f"features are on {cf.grid.n_rows}x{cf.grid.n_cols} cells, "
            f"checkpoint expects {grid.n_rows}x{grid.n_cols}")
    if cf.dim != cfg.input_dim:
        raise ConfigError(
            f"features have dim {cf.dim}, checkpoint expects {cfg.input_dim}")
    return PanCANModel(cfg, params=params), cf


def _write_heat(prefix, weights, cell_px):
    write_pgm(f"{prefix}.pgm", weights_to_gray(weights, cell_px))
    write_csv_matrix(f"{prefix}.csv", weights)
    print(f"wrote {prefix}.pgm and {prefix}.csv")


def cmd_export_context(args) -> int:
    model, cf = _load_export_inputs(args)
    try:
        r, c = (int(v) for v in args.cell.split(","))
    except ValueError:
        raise ConfigError(f"--cell expects 'row,col', got {args.cell!r}") from None
    weights = context_influence(model, cf, (r, c), args.layer)
    _write_heat(args.out, weights, args.cell_px)
    return 0


def cmd_export_scale(args) -> int:
    model, cf = _load_export_inputs(args)
    weights = scale_influence(model, cf, args.scale)
    _write_heat(args.out, weights, args.cell_px)
    return 0


def cmd_export_evolution(args) -> int:
    ckpt_dir = Path(args.ckpt_dir)
    if not ckpt_dir.is_dir():
        raise ConfigError(f"checkpoint directory {ckpt_dir} does not exist")
    epochs = [int(p) for p in args.epochs.split(",") if p.strip()]
    cf = load_features(args.image_features)
    for epoch in epochs:
        path = ckpt_dir / f"epoch-{epoch:03d}.ckpt"
        if not path.is_file():
            raise ConfigError(f"missing snapshot {path}")
        cfg, params = load_checkpoint(path)
        model = PanCANModel(cfg, params=params)
        if cf.dim != cfg.input_dim:
            raise ConfigError(
                f"features have dim {cf.dim}, checkpoint expects {cfg.input_dim}")
        weights = scale_influence(model, cf, args.scale)
        _write_heat(f"{args.out}-epoch{epoch:03d}", weights, args.cell_px)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pancan",
        description="Panoptic context aggregation networks: train, evaluate, "
                    "verify the kernel fixed point, run ablations, and export "
                    "learned context weights.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the [train] seed")
    p.add_argument("--out", default=None, help="override the [output] dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="run config describing the data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--json", default=None, help="also write the JSON mirror here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the kernel fixed-point oracle suite")
    p.add_argument("--n", type=int, default=12, help="max cells per instance")
    p.add_argument("--c", type=int, default=4, help="max adjacency systems")
    p.add_argument("--t", type=int, default=3, help="max unfolding depth")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--gamma", type=float, default=None,
                   help="force this gamma instead of a safe default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", help="retrain along one ablation axis")
    p.add_argument("--axis", required=True,
                   choices=("order", "depth", "threshold", "interval", "module"))
    p.add_argument("--values", required=True,
                   help="comma-separated axis values ('none' allowed for threshold)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-context",
                       help="heatmap of neighbor influence on one cell")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image-features", required=True)
    p.add_argument("--cell", required=True, help="row,col of the center cell")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out", default="context")
    p.add_argument("--cell-px", type=int, default=40)
    p.set_defaults(func=cmd_export_context)

    p = sub.add_parser("export-scale",
                       help="heatmap of micro-cell importance in macro-cells")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image-features", required=True)
    p.add_argument("--scale", type=int, default=0)
    p.add_argument("--out", default="scale")
    p.add_argument("--cell-px", type=int, default=40)
    p.set_defaults(func=cmd_export_scale)

    p = sub.add_parser("export-evolution",
                       help="heatmap sequence across epoch snapshots")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--epochs", required=True, help="comma-separated epochs")
    p.add_argument("--image-features", required=True)
    p.add_argument("--scale", type=int, default=0)
    p.add_argument("--out", default="evolution")
    p.add_argument("--cell-px", type=int, default=40)
    p.set_defaults(func=cmd_export_evolution)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_help()
        return 0
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PancanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
