import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from srpose_kit import cli
from srpose_kit import model as M
from srpose_kit.data import load_dataset


def _tree_hash(root: Path) -> str:
    # run_config.txt records the output directory, so it is left out
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run_config.txt":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["generate", "--pairs", "40", "--val-pairs", "10", "--test-pairs", "5",
                     "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    data, run = root / "data", root / "run"
    t0 = time.perf_counter()
    assert cli.main(["generate", "--pairs", "200", "--val-pairs", "50", "--out", str(data)]) == 0
    assert cli.main(["train", "--data", str(data), "--preset", "smoke", "--out", str(run)]) == 0
    return data, run, time.perf_counter() - t0


def test_generate_is_deterministic(tmp_path, small_data):
    again = tmp_path / "again"
    assert cli.main(["generate", "--pairs", "40", "--val-pairs", "10", "--test-pairs", "5",
                     "--seed", "7", "--out", str(again)]) == 0
    assert _tree_hash(again) == _tree_hash(small_data)
    assert len(load_dataset(small_data, "test")) == 5


def test_generate_object_scenario_has_prompts(tmp_path):
    assert cli.main(["generate", "--scenario", "o2c", "--pairs", "10", "--val-pairs", "2",
                     "--out", str(tmp_path)]) == 0
    assert all(s.prompt is not None for s in load_dataset(tmp_path, "train"))


def test_run_config_reproduces_outputs(tmp_path, small_data):
    cfg = small_data / "run_config.txt"
    text = cfg.read_text()
    assert "verb=generate" in text and "seed=7" in text
    redo = tmp_path / "redo"
    assert cli.main(["generate", "--config", str(cfg), "--out", str(redo)]) == 0
    assert _tree_hash(redo) == _tree_hash(small_data)


def test_config_precedence(tmp_path, monkeypatch):
    conf = tmp_path / "c.txt"
    conf.write_text("pairs = 12  # from the file\nseed=3\n")
    cfg = cli.resolve("generate", {"seed": "5"}, cli.read_config_file(conf))
    assert cfg["pairs"] == 12 and cfg["seed"] == 5 and cfg["val_pairs"] == 200
    monkeypatch.setenv("SRPOSE_KIT_THREADS", "3")
    assert cli.resolve("generate", {})["threads"] == 3
    assert cli.resolve("generate", {"threads": "2"})["threads"] == 2
    with pytest.raises(cli.UsageError):
        cli.resolve("generate", {}, {"bogus": "1"})
    with pytest.raises(cli.UsageError):
        cli.resolve("generate", {}, {"verb": "train"})


def test_exit_codes(tmp_path, small_data, capsys):
    assert cli.main(["generate", "--pairs", "x", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["generate", "--clutter", "1.5", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["train", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == cli.EXIT_USAGE
    # a diverging run is a runtime failure, distinct from usage errors
    assert cli.main(["train", "--data", str(small_data), "--epochs", "1", "--lr", "1e300",
                     "--out", str(tmp_path / "div")]) == cli.EXIT_RUNTIME


def test_eval_gt_echo_is_perfect(tmp_path, small_data):
    out = tmp_path / "eval"
    assert cli.main(["eval", "--data", str(small_data), "--split", "val", "--predictor", "gt-echo",
                     "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["aggregates"]["auc_5deg"] == 1.0 and rep["aggregates"]["auc_20deg"] == 1.0
    assert rep["aggregates"]["rot_deg_median"] == 0.0
    assert "degenerate" in rep and rep["count"] == 10
    rows = list(csv.DictReader((out / "per_sample.csv").open()))
    assert len(rows) == 10
    assert (out / "error_cdf.png").stat().st_size > 0


def test_eval_baseline_through_same_report(tmp_path, small_data):
    out = tmp_path / "eval"
    assert cli.main(["eval", "--data", str(small_data), "--split", "val", "--predictor", "baseline-ransac",
                     "--ransac-threshold", "3e-3", "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["count"] == 10 and rep["aggregates"]["rot_deg_median"] < 5.0


def test_eval_rejects_width_mismatch(tmp_path, small_data):
    ckpt = tmp_path / "m.ckpt"
    mc = M.PRESETS["micro"]
    M.save_checkpoint(ckpt, M.init_params(mc, 0), mc)
    assert cli.main(["eval", "--data", str(small_data), "--checkpoint", str(ckpt),
                     "--out", str(tmp_path / "e")]) == cli.EXIT_USAGE


def test_train_ablation_sets_config(tmp_path, small_data):
    out = tmp_path / "abl"
    assert cli.main(["train", "--data", str(small_data), "--ablate", "no-guidance", "--epochs", "1",
                     "--out", str(out)]) == 0
    _, mc, _, _ = M.load_checkpoint(out / "model.ckpt")
    assert mc.guidance_enabled is False and mc.cross_attention_enabled is True


def test_resume_continues_schedule(tmp_path, small_data, monkeypatch):
    full = tmp_path / "full"
    saved = {}
    real = M.save_checkpoint

    def keep_first(path, *a, **k):
        # keep the checkpoint written after the first epoch
        real(path, *a, **k)
        saved.setdefault("bytes", Path(path).read_bytes())

    monkeypatch.setattr(M, "save_checkpoint", keep_first)
    assert cli.main(["train", "--data", str(small_data), "--epochs", "3", "--out", str(full)]) == 0
    monkeypatch.setattr(M, "save_checkpoint", real)
    lrs = [float(r["lr"]) for r in csv.DictReader((full / "training_log.csv").open())]
    ck = tmp_path / "epoch0.ckpt"
    ck.write_bytes(saved["bytes"])
    resumed = tmp_path / "resumed"
    assert cli.main(["train", "--data", str(small_data), "--epochs", "3", "--resume", str(ck),
                     "--out", str(resumed)]) == 0
    rows = list(csv.DictReader((resumed / "training_log.csv").open()))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert np.allclose([float(r["lr"]) for r in rows], lrs[1:])


def test_eval_attention_dump(tmp_path, smoke_run):
    data, run, _ = smoke_run
    out = tmp_path / "eval"
    assert cli.main(["eval", "--data", str(data), "--split", "val", "--checkpoint", str(run / "model.ckpt"),
                     "--attention-dump", "1", "--out", str(out)]) == 0
    dumps = sorted((out / "attention").glob("*.npz"))
    assert len(dumps) == 50
    z = np.load(dumps[0])
    assert z["coords1"].shape[1] == 2 and "scores_layer0" in z


def test_smoke_preset_under_five_minutes(smoke_run):
    _, run, elapsed = smoke_run
    assert elapsed < 300
    rows = list(csv.DictReader((run / "training_log.csv").open()))
    assert len(rows) == 5
    assert (run / "training_curves.png").exists() and (run / "run_config.txt").exists()


def test_bench_writes_stage_report(tmp_path):
    out = tmp_path / "bench"
    assert cli.main(["bench", "--keypoints", "128", "--outliers", "0,0.3", "--reps", "2", "--warmup", "0",
                     "--out", str(out)]) == 0
    header = (out / "bench.csv").read_text().splitlines()[0].split(",")
    for stage in ("extracting_ms", "matching_ms", "recovering_ms", "regressing_ms"):
        assert stage in header
    assert (out / "stage_timing.png").exists()


def test_verify_filter_and_bad_checkpoint(tmp_path, capsys):
    assert cli.main(["verify", "--filter", "rotation_manifold"]) == 0
    assert "1/1 checks passed" in capsys.readouterr().out
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert cli.main(["verify", "--filter", "rotation_manifold", "--checkpoint", str(bad)]) == 1
    assert cli.main(["verify", "--filter", "no-such-check"]) == cli.EXIT_USAGE
