"""CLI surface: config handling, command round trips, and exit codes."""

import json
import time

import numpy as np
import pytest

from pancan import cli
from pancan.grids import load_features, read_ppm


TOY_CONFIG = """\
[model]
grid_rows = 4
grid_cols = 4
depth = 1
attn_dim = 3
proj_dim = 6
fusion_dim = 8
heads = 2
max_order = 2
gamma = 0.4
tau = 0.5
n_groups = 2
d_pos = 4

[train]
epochs = 2
batch = 8
lr = 1e-3
ema_decay = 0.9
seed = 0

[data]
source = synth
n_samples = 20
n_labels = 3
noise = 0.1
split = 0.6,0.2,0.2
seed = 1

[output]
dir = {out}
snapshot_every = 1
"""


@pytest.fixture
def workdir(tmp_path):
    out = tmp_path / "run"
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(TOY_CONFIG.format(out=out))
    return tmp_path, cfg, out


class TestHelpAndErrors:
    def test_no_args_prints_help(self, capsys):
        assert cli.main([]) == 0
        assert "train" in capsys.readouterr().out

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[model]\nwidgets = 3\n")
        code = cli.main(["train", "--config", str(bad)])
        assert code == 1
        assert "widgets" in capsys.readouterr().err

    def test_missing_config_file(self, capsys):
        assert cli.main(["train", "--config", "/nonexistent.cfg"]) == 1
        assert "error:" in capsys.readouterr().err


class TestTrainEvalRoundTrip:
    def test_round_trip_under_a_minute(self, workdir, capsys):
        tmp_path, cfg, out = workdir
        start = time.monotonic()
        assert cli.main(["train", "--config", str(cfg)]) == 0
        ckpt = out / "model.ckpt"
        assert ckpt.is_file()
        assert (out / "train-log.jsonl").is_file()
        assert (out / "example.feats").is_file()
        assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(cfg),
                         "--topk", "3",
                         "--json", str(out / "eval.json")]) == 0
        elapsed = time.monotonic() - start
        assert elapsed < 60.0
        captured = capsys.readouterr().out
        assert "mAP" in captured
        payload = json.loads((out / "eval.json").read_text())
        assert set(payload) >= {"mAP", "CF1", "OF1"}

    def test_log_is_json_lines(self, workdir):
        tmp_path, cfg, out = workdir
        cli.main(["train", "--config", str(cfg)])
        lines = (out / "train-log.jsonl").read_text().strip().split("\n")
        for line in lines:
            entry = json.loads(line)
            assert {"epoch", "loss", "lr"} <= set(entry)

    def test_train_deterministic_given_seed(self, workdir):
        tmp_path, cfg, out = workdir
        cli.main(["train", "--config", str(cfg), "--out", str(out / "a")])
        cli.main(["train", "--config", str(cfg), "--out", str(out / "b")])
        a = (out / "a" / "model.ckpt").read_bytes()
        b = (out / "b" / "model.ckpt").read_bytes()
        assert a == b
        la = (out / "a" / "train-log.jsonl").read_bytes()
        lb = (out / "b" / "train-log.jsonl").read_bytes()
        assert la == lb


class TestVerify:
    def test_verify_passes_with_defaults(self, capsys):
        assert cli.main(["verify", "--trials", "8", "--n", "8"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 3

    def test_verify_diverges_with_huge_gamma(self, capsys):
        code = cli.main(["verify", "--trials", "2", "--gamma", "50.0"])
        assert code != 0
        assert "divergence" in capsys.readouterr().err


class TestAblate:
    def test_threshold_axis_csv(self, workdir, capsys):
        tmp_path, cfg, out = workdir
        csv_path = out / "thr.csv"
        assert cli.main(["ablate", "--axis", "threshold",
                         "--values", "none,0.71", "--config", str(cfg),
                         "--out", str(csv_path)]) == 0
        text = csv_path.read_text()
        lines = text.strip().split("\n")
        assert lines[0] == "Threshold Value,mAP,CF1,OF1"
        assert [l.split(",")[0] for l in lines[1:]] == ["none", "0.71"]


class TestExports:
    def test_context_and_scale_heatmaps(self, workdir):
        tmp_path, cfg, out = workdir
        cli.main(["train", "--config", str(cfg)])
        ckpt = out / "model.ckpt"
        feats = out / "example.feats"
        prefix = str(out / "ctx")
        assert cli.main(["export-context", "--ckpt", str(ckpt),
                         "--image-features", str(feats), "--cell", "1,2",
                         "--layer", "0", "--out", prefix]) == 0
        pgm = (out / "ctx.pgm").read_bytes()
        assert pgm.startswith(b"P5\n")
        rows = (out / "ctx.csv").read_text().strip().split("\n")
        assert len(rows) == 4 and len(rows[0].split(",")) == 4

        assert cli.main(["export-scale", "--ckpt", str(ckpt),
                         "--image-features", str(feats), "--scale", "0",
                         "--out", str(out / "sc")]) == 0
        assert (out / "sc.pgm").is_file() and (out / "sc.csv").is_file()

    def test_evolution_sequence(self, workdir):
        tmp_path, cfg, out = workdir
        cli.main(["train", "--config", str(cfg)])
        assert cli.main(["export-evolution", "--ckpt-dir", str(out),
                         "--epochs", "0,1",
                         "--image-features", str(out / "example.feats"),
                         "--out", str(out / "evo")]) == 0
        for epoch in (0, 1):
            assert (out / f"evo-epoch{epoch:03d}.pgm").is_file()
            assert (out / f"evo-epoch{epoch:03d}.csv").is_file()

    def test_export_rejects_mismatched_features(self, workdir, tmp_path, capsys):
        _, cfg, out = workdir
        cli.main(["train", "--config", str(cfg)])
        from pancan.grids import CellFeatures, GridSpec, save_features
        bad = tmp_path / "bad.feats"
        save_features(CellFeatures(0, GridSpec.cells(2, 2), np.zeros((3, 4))), bad)
        code = cli.main(["export-scale", "--ckpt", str(out / "model.ckpt"),
                         "--image-features", str(bad), "--out", str(out / "x")])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestFilesSource:
    def test_eval_on_feature_files(self, workdir, tmp_path, capsys):
        tmp_path2, cfg, out = workdir
        cli.main(["train", "--config", str(cfg)])
        # build a tiny files-backed dataset from synthetic features
        from pancan import synth
        from pancan.grids import CellFeatures, GridSpec, save_features
        grid = GridSpec.cells(4, 4)
        ds = synth.make_synth(3, 10, grid, n_labels=3, noise=0.1,
                              split=(0.4, 0.3, 0.3))
        data_dir = tmp_path2 / "files"
        data_dir.mkdir()
        rows = ["file,l0,l1,l2"]
        feats = np.concatenate([ds.train.features, ds.val.features,
                                ds.test.features])
        labels = np.concatenate([ds.train.labels, ds.val.labels,
                                 ds.test.labels])
        for i in range(feats.shape[0]):
            name = f"s{i:03d}.feats"
            save_features(CellFeatures(0, grid, feats[i]), data_dir / name)
            rows.append(name + "," + ",".join(str(v) for v in labels[i]))
        (data_dir / "labels.csv").write_text("\n".join(rows) + "\n")
        files_cfg = tmp_path2 / "files.cfg"
        files_cfg.write_text(TOY_CONFIG.format(out=out).replace(
            "source = synth", "source = files\ndir = " + str(data_dir)))
        code = cli.main(["eval", "--ckpt", str(out / "model.ckpt"),
                         "--data", str(files_cfg)])
        assert code == 0
        assert "mAP" in capsys.readouterr().out
