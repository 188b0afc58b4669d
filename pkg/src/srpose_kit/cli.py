"""Command-line entry point: generate, train, eval, bench, verify.

Every verb resolves its settings (flags > ``--config`` file > defaults) before
doing any work and writes them to ``run_config.txt`` in its output directory.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numerical
failure.  ``verify`` exits with the number of failed checks (capped).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConfigMismatch, DivergenceDetected, ParseError, SRPoseError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
VERIFY_EXIT_CAP = 100


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v):
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    return tuple(float(x) for x in str(v).split(",") if x.strip())


def _ints(v):
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).split(",") if x.strip())


def _strs(v):
    if isinstance(v, (list, tuple)):
        return tuple(v)
    return tuple(x.strip() for x in str(v).split(",") if x.strip())


# (name, type, default, help); names map to --kebab-case flags and snake_case config keys
COMMON = [
    ("seed", int, 0, "master seed"),
    ("out", str, None, "output directory"),
    ("threads", int, None, "worker cap (falls back to SRPOSE_KIT_THREADS, then 1)"),
]

OPTIONS = {
    "generate": [
        ("scenario", str, "c2w", "c2w (camera to world) or o2c (object to camera)"),
        ("pairs", int, 2000, "training pairs"),
        ("val_pairs", int, 200, "validation pairs"),
        ("test_pairs", int, 0, "test pairs"),
        ("d", int, 32, "descriptor width"),
        ("keypoints", int, 64, "keypoints per view (padding size)"),
        ("noise_px", float, 0.5, "keypoint position noise (px)"),
        ("noise_desc", float, 0.05, "descriptor noise"),
        ("clutter", float, 0.2, "fraction of unmatched clutter keypoints"),
        ("max_rot_deg", float, 45.0, "maximum relative rotation angle"),
        ("min_rot_deg", float, 0.0, "minimum relative rotation angle"),
        ("fx_min", float, 500.0, "smallest sampled focal length"),
        ("fx_max", float, 500.0, "largest sampled focal length"),
    ],
    "train": [
        ("data", str, None, "dataset directory"),
        ("preset", str, "toy", "toy, smoke or full"),
        ("ablate", _strs, (), "comma-separated ablations"),
        ("epochs", int, None, "override preset epochs"),
        ("lr", float, None, "override preset peak learning rate"),
        ("batch_size", int, None, "override preset batch size"),
        ("max_pairs", int, None, "use only the first N training pairs"),
        ("resume", str, None, "checkpoint to resume from"),
        ("w_t", float, 1.0, "weight of the translation regression term"),
        ("w_tn", float, 1.0, "weight of the translation norm term"),
        ("w_ta", float, 1.0, "weight of the translation angle term"),
    ],
    "eval": [
        ("data", str, None, "dataset directory"),
        ("split", str, "val", "train, val or test"),
        ("predictor", str, "model", "model, baseline-ransac or gt-echo"),
        ("checkpoint", str, None, "model checkpoint (predictor=model)"),
        ("attention_dump", _bool, False, "write per-sample guided attention scores"),
        ("ransac_iters", int, 1000, "RANSAC iteration cap"),
        ("ransac_threshold", float, 1e-3, "Sampson inlier threshold on calibrated rays"),
    ],
    "bench": [
        ("checkpoint", str, None, "model checkpoint (random weights when omitted)"),
        ("preset", str, "toy", "model preset used without a checkpoint"),
        ("d", int, None, "descriptor width without a checkpoint"),
        ("keypoints", _ints, (256, 1024, 2048), "comma-separated keypoint counts"),
        ("outliers", _floats, (0.0, 0.2, 0.3, 0.4), "comma-separated outlier rates"),
        ("reps", int, 30, "timed repetitions per stage"),
        ("warmup", int, 3, "untimed warmup calls"),
        ("ransac_iters", int, 1000, "RANSAC iteration cap"),
        ("ransac_threshold", float, 3e-3, "Sampson inlier threshold on calibrated rays"),
    ],
    "verify": [
        ("filter", str, None, "only run checks whose name contains this"),
        ("checkpoint", str, None, "also validate this checkpoint"),
    ],
}

TRAIN_PRESET_PAIRS = {"toy": None, "smoke": 200, "full": None}
MODEL_PRESET_OF = {"toy": "toy", "smoke": "toy", "full": "full"}


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="srpose-kit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True
    for verb, opts in OPTIONS.items():
        sp = sub.add_parser(verb)
        sp.add_argument("--config", help="key=value file (flags override it)")
        for name, typ, default, help_ in COMMON + opts:
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            sp.add_argument(_flag(name), dest=name, default=None, metavar=name.upper(),
                            help=f"{help_} [default: {shown}]")
    return p


def read_config_file(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve(verb: str, flags: dict, file_values: dict | None = None) -> dict:
    """Merge flags over file values over defaults and coerce every value."""
    file_values = dict(file_values or {})
    if file_values.pop("verb", verb) != verb:
        raise UsageError(f"config file was written for another verb, not {verb}")
    spec = COMMON + OPTIONS[verb]
    known = {name for name, *_ in spec}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {verb}: {', '.join(unknown)}")
    cfg = {}
    for name, typ, default, _ in spec:
        raw = flags.get(name)
        if raw is None:
            raw = file_values.get(name)
        if raw is None or raw == "None":
            cfg[name] = default
            continue
        try:
            cfg[name] = typ(raw)
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad value for {name}: {raw!r} ({e})") from None
    if cfg["threads"] is None:
        env = os.environ.get("SRPOSE_KIT_THREADS")
        try:
            cfg["threads"] = int(env) if env else 1
        except ValueError:
            raise UsageError(f"SRPOSE_KIT_THREADS must be an integer, got {env!r}") from None
    if cfg["threads"] < 1:
        raise UsageError("threads must be >= 1")
    return cfg


def format_run_config(verb: str, cfg: dict) -> str:
    lines = [f"verb={verb}"]
    for k in sorted(cfg):
        v = cfg[k]
        lines.append(f"{k}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


def _out_dir(cfg, verb) -> Path:
    if not cfg["out"]:
        raise UsageError(f"{verb} needs --out DIR")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, verb: str, cfg: dict):
    (out / "run_config.txt").write_text(format_run_config(verb, cfg), encoding="utf-8", newline="\n")


def _need(cfg, key, verb):
    if not cfg.get(key):
        raise UsageError(f"{verb} needs {_flag(key)}")
    return cfg[key]


# -- verbs --------------------------------------------------------------------

def cmd_generate(cfg: dict) -> int:
    from .data import GenConfig, generate_dataset, save_dataset

    out = _out_dir(cfg, "generate")
    gen = GenConfig(scenario=cfg["scenario"], pairs=cfg["pairs"], val_pairs=cfg["val_pairs"],
                    seed=cfg["seed"], d=cfg["d"], n_keypoints=cfg["keypoints"], noise_px=cfg["noise_px"],
                    test_pairs=cfg["test_pairs"], noise_desc=cfg["noise_desc"], clutter=cfg["clutter"],
                    max_rot_deg=cfg["max_rot_deg"], min_rot_deg=cfg["min_rot_deg"],
                    fx_min=cfg["fx_min"], fx_max=cfg["fx_max"])
    splits = [generate_dataset(gen, "train", cfg["threads"]), generate_dataset(gen, "val", cfg["threads"])]
    if cfg["test_pairs"]:
        splits.append(generate_dataset(gen, "test", cfg["threads"]))
    save_dataset(out, splits)
    _write_run_config(out, "generate", cfg)
    print(f"wrote {sum(len(s) for s in splits)} pairs to {out}")
    return EXIT_OK


def _model_config(preset, ablations, d):
    from .model import ABLATIONS, PRESETS

    if preset not in PRESETS:
        raise UsageError(f"unknown model preset {preset!r}; choose from {sorted(PRESETS)}")
    mc = replace(PRESETS[preset], d=d)
    for name in ablations:
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        mc = replace(mc, **ABLATIONS[name])
    return mc


def _dataset_d(ds) -> int:
    for s in ds:
        return int(s.kps1.descriptors.shape[1])
    raise ConfigError("dataset split is empty")


def cmd_train(cfg: dict) -> int:
    from . import plotting
    from .data import load_dataset
    from .model import load_checkpoint, save_checkpoint
    from .training import TRAIN_PRESETS, LossWeights, train, train_config_dict

    out = _out_dir(cfg, "train")
    preset = cfg["preset"]
    if preset not in TRAIN_PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(TRAIN_PRESETS)}")
    root = _need(cfg, "data", "train")
    ds = load_dataset(root, "train")
    val = load_dataset(root, "val")
    limit = cfg["max_pairs"] or TRAIN_PRESET_PAIRS[preset]
    samples = ds.samples[:limit] if limit else ds.samples
    d = _dataset_d(samples)
    model_config = _model_config(MODEL_PRESET_OF[preset], cfg["ablate"], d)
    tc = TRAIN_PRESETS[preset]
    over = {k: cfg[c] for k, c in (("epochs", "epochs"), ("max_lr", "lr"), ("batch_size", "batch_size"))
            if cfg[c] is not None}
    tc = replace(tc, seed=cfg["seed"], **over)
    weights = LossWeights(t=cfg["w_t"], tn=cfg["w_tn"], ta=cfg["w_ta"])
    params = opt_state = None
    if cfg["resume"]:
        params, _, _, opt_state = load_checkpoint(cfg["resume"], expected=model_config)
    _write_run_config(out, "train", cfg)
    ckpt = out / "model.ckpt"
    meta = {"train": train_config_dict(tc), "data": str(root)}
    t0 = time.perf_counter()

    def on_epoch(epoch, p, opt, log):
        r = log.rows[-1]
        print(f"epoch {epoch:3d}  loss {r['mean_loss']:.4f}  val rot {r['val_rot_med_deg']:.2f} deg  "
              f"val trans {r['val_trans_med']:.2f} deg  ({time.perf_counter() - t0:.0f}s)", flush=True)
        save_checkpoint(ckpt, p, model_config, meta, opt.state())

    try:
        params, log = train(samples, tc, weights, model_config, val=val.samples, params=params,
                            optimizer_state=opt_state, epoch_callback=on_epoch)
    except DivergenceDetected as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        if e.last_good is not None:
            from . import tensor as T
            good = {k: T.parameter(v, k) for k, v in e.last_good.items()}
            save_checkpoint(out / "last_good.ckpt", good, model_config, meta)
        return EXIT_RUNTIME
    log.to_csv(out / "training_log.csv")
    if log.rows:
        plotting.training_curves(log.rows, out / "training_curves.png")
    print(f"checkpoint {ckpt}  ({time.perf_counter() - t0:.0f}s)")
    return EXIT_OK


def _predictor(cfg, samples):
    """Returns ``(name, predict(sample) -> Pose, model bits or None)``."""
    name = cfg["predictor"]
    if name == "gt-echo":
        return lambda s: s.gt, None
    if name == "baseline-ransac":
        from . import baseline
        rc = baseline.RansacConfig(max_iters=cfg["ransac_iters"], inlier_threshold=cfg["ransac_threshold"],
                                   seed=cfg["seed"])

        def predict(s):
            m = baseline.match_mutual_nn(s.kps1, s.kps2)
            return baseline.ransac_essential(m, s.kps1, s.kps2, s.K1, s.K2, rc).pose
        return predict, None
    if name == "model":
        from .model import load_checkpoint, predict_pose
        ckpt = _need(cfg, "checkpoint", "eval --predictor model")
        params, mc, _, _ = load_checkpoint(ckpt)
        d = _dataset_d(samples)
        if d != mc.d:
            raise ConfigMismatch(f"checkpoint descriptor width {mc.d} != dataset descriptor width {d}")
        return (lambda s: predict_pose(s, params, mc)), (params, mc)
    raise UsageError(f"unknown predictor {name!r}; choose model, baseline-ransac or gt-echo")


def _dump_attention(path: Path, sample, params, mc):
    from .model import forward

    diag = forward(sample, params, mc)[2]
    arrays = {"coords1": sample.kps1.coords, "coords2": sample.kps2.coords,
              "valid1": sample.kps1.valid_mask, "valid2": sample.kps2.valid_mask}
    for i, a in enumerate(diag["cross_logits"]):
        arrays[f"scores_layer{i}"] = a
    np.savez_compressed(path, **arrays)


def cmd_eval(cfg: dict) -> int:
    from . import plotting
    from .data import load_dataset
    from .geometry import Pose
    from .metrics import OBJECT_THRESHOLDS, Thresholds, aggregate, sample_errors

    out = _out_dir(cfg, "eval")
    ds = load_dataset(_need(cfg, "data", "eval"), cfg["split"])
    samples = ds.samples
    predict, model = _predictor(cfg, samples)
    _write_run_config(out, "eval", cfg)
    if cfg["attention_dump"]:
        if model is None:
            raise UsageError("--attention-dump needs --predictor model")
        (out / "attention").mkdir(exist_ok=True)
    rows, failures = [], 0
    for i, s in enumerate(samples):
        try:
            pred = predict(s)
        except SRPoseError:
            # classical failures (too few matches, no consensus) are scored as the identity pose
            pred = Pose.identity()
            failures += 1
        rows.append(sample_errors(pred, s.gt, s.model_points, s.K2))
        if cfg["attention_dump"]:
            _dump_attention(out / "attention" / f"{cfg['split']}_{i:06d}.npz", s, *model)
    scenario = ds.manifest.get("scenario", "c2w")
    th = OBJECT_THRESHOLDS if scenario == "o2c" else Thresholds()
    report = aggregate(rows, th)
    report.aggregates["predictor_failures"] = failures
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "per_sample.csv").write_text(report.to_csv(), encoding="utf-8")
    plotting.error_cdf({cfg["predictor"]: [r["pose_err_deg"] for r in rows]}, out / "error_cdf.png")
    a = report.aggregates
    trans = a.get("trans_angle_deg_median", float("nan"))
    print(f"{len(rows)} pairs  median rot {a['rot_deg_median']:.3f} deg  median trans angle {trans:.3f} deg  "
          f"auc@5/10/20 {a['auc_5deg']:.3f}/{a['auc_10deg']:.3f}/{a['auc_20deg']:.3f}  "
          f"degenerate {report.degenerate}  failures {failures}")
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    from . import plotting
    from .baseline import RansacConfig
    from .benchmark import STAGES, rows_to_csv, run_benchmark
    from .model import init_params, load_checkpoint

    out = _out_dir(cfg, "bench")
    if cfg["checkpoint"]:
        params, mc, _, _ = load_checkpoint(cfg["checkpoint"])
    else:
        mc = _model_config(cfg["preset"], (), cfg["d"] or 32)
        params = init_params(mc, cfg["seed"])
    _write_run_config(out, "bench", cfg)

    def show(rows):
        for r in rows:
            print(f"{r['pipeline']:10s} n={r['keypoints']:5d} outliers={r['outlier_rate']:.2f}  " +
                  "  ".join(f"{s[:-3]} {r[s]:.2f}" for s in STAGES) + f"  total {r['total_ms']:.2f} ms",
                  flush=True)

    rc = RansacConfig(max_iters=cfg["ransac_iters"], inlier_threshold=cfg["ransac_threshold"], seed=cfg["seed"])
    rows = run_benchmark(params, mc, cfg["keypoints"], cfg["outliers"], cfg["reps"], cfg["warmup"],
                         cfg["seed"], rc, progress=show)
    (out / "bench.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    top = max(cfg["outliers"])
    plotting.stage_timing([r for r in rows if r["outlier_rate"] == top], STAGES, out / "stage_timing.png")
    return EXIT_OK


def cmd_verify(cfg: dict) -> int:
    from .checks import run_checks

    if cfg["out"]:
        out = _out_dir(cfg, "verify")
        _write_run_config(out, "verify", cfg)
    results = run_checks(cfg["filter"], cfg["checkpoint"])
    if not results:
        raise UsageError(f"no check matches filter {cfg['filter']!r}")
    failed = sum(not ok for _, ok, _, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    if cfg["out"]:
        lines = ["check,ok,seconds,detail"] + [f"{n},{int(ok)},{dt:.3f},\"{d}\"" for n, ok, d, dt in results]
        (Path(cfg["out"]) / "verify.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return min(failed, VERIFY_EXIT_CAP)


VERBS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
         "verify": cmd_verify}


def _limit_threads(n: int):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = vars(args)
    verb = flags.pop("verb")
    config_path = flags.pop("config")
    try:
        cfg = resolve(verb, flags, read_config_file(config_path) if config_path else None)
        _limit_threads(cfg["threads"])
        return VERBS[verb](cfg)
    except (UsageError, ConfigError, ConfigMismatch, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SRPoseError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
