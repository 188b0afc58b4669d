"""Per-stage wall-clock comparison of the regression and classical pipelines."""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from . import baseline
from .data import GenConfig, PairSample, camera_to_world_geometry
from .errors import SRPoseError
from .geometry import Pose
from .keypoints import KeypointSet, pad_to, synthetic_detect
from .model import ModelConfig, forward_batch, make_batch

STAGES = ("extracting_ms", "matching_ms", "recovering_ms", "regressing_ms")
COLUMNS = ("pipeline", "keypoints", "outlier_rate") + STAGES + ("total_ms", "ransac_iters")
# about three detector-noise sigmas on calibrated rays at the default focal length;
# the library default of 1e-3 sits at one sigma and rejects most true matches
BENCH_RANSAC = baseline.RansacConfig(inlier_threshold=3e-3)


def median_time(fn, reps: int = 30, warmup: int = 3):
    """Median seconds of ``fn()`` over ``reps`` calls after ``warmup`` untimed calls."""
    out = None
    for _ in range(warmup):
        out = fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def inject_outliers(kps: KeypointSet, rate: float, rng: np.random.Generator) -> KeypointSet:
    """Permute the descriptors of a ``rate`` fraction of valid rows so their matches become wrong."""
    k = kps.copy()
    valid = np.flatnonzero(k.valid_mask)
    n = int(round(rate * len(valid)))
    if n < 2:
        return k
    pick = rng.choice(valid, size=n, replace=False)
    # a cyclic shift guarantees no row keeps its own descriptor
    k.descriptors[pick] = k.descriptors[np.roll(pick, 1)]
    k.ids[pick] = -1
    return k


def bench_config(n_keypoints: int, d: int, seed: int = 0, base: GenConfig | None = None) -> GenConfig:
    base = base or GenConfig()
    # roughly a third of the cone is in view, so oversample to fill n keypoints
    return replace(base, n_keypoints=n_keypoints, d=d, clutter=0.0, seed=seed,
                   scene_points=max(base.scene_points, 4 * n_keypoints))


def bench_pair(cfg: GenConfig, seed: int = 0):
    """A camera-to-world pair plus its scene, for timing extraction on the same data."""
    rng = np.random.default_rng([seed, cfg.n_keypoints])
    scene, K1, K2, gt = camera_to_world_geometry(rng, cfg)
    kps1 = synthetic_detect(scene, Pose.identity(), K1, cfg.image_size, cfg.noise, rng, shuffle=True)
    kps2 = synthetic_detect(scene, gt, K2, cfg.image_size, cfg.noise, rng, shuffle=True)
    pair = PairSample(pad_to(kps1, cfg.n_keypoints), pad_to(kps2, cfg.n_keypoints), K1, K2, gt,
                      "c2w", image_size=cfg.image_size)
    return pair, scene


def run_benchmark(params, model_config: ModelConfig, keypoint_counts=(256, 1024, 2048),
                  outlier_rates=(0.0, 0.2, 0.3, 0.4), reps: int = 30, warmup: int = 3, seed: int = 0,
                  ransac: baseline.RansacConfig = BENCH_RANSAC, base: GenConfig | None = None,
                  progress=None) -> list:
    """Rows with stage medians (ms) for ``classical`` and ``regression`` per size and outlier rate.

    Keypoint extraction is the synthetic detector run on both views and is
    shared by the two pipelines.
    """
    rows = []
    for n in keypoint_counts:
        cfg = bench_config(n, model_config.d, seed, base)
        pair, scene = bench_pair(cfg, seed)

        def extract():
            r = np.random.default_rng(0)
            synthetic_detect(scene, Pose.identity(), pair.K1, cfg.image_size, cfg.noise, r)
            return synthetic_detect(scene, pair.gt, pair.K2, cfg.image_size, cfg.noise, r)

        t_extract, _ = median_time(extract, reps, warmup)
        for rate in outlier_rates:
            rng = np.random.default_rng([seed, n, int(round(rate * 1000))])
            k1, k2 = pair.kps1, inject_outliers(pair.kps2, rate, rng)
            t_match, matches = median_time(lambda: baseline.match_mutual_nn(k1, k2), reps, warmup)
            iters = float("nan")
            try:
                t_rec, res = median_time(
                    lambda: baseline.ransac_essential(matches, k1, k2, pair.K1, pair.K2, ransac), reps, warmup)
                iters = res.iterations
            except SRPoseError:
                t_rec = float("nan")
            batch = make_batch([replace(pair, kps2=k2)], model_config)
            t_reg, _ = median_time(lambda: forward_batch(batch, params, model_config), reps, warmup)
            ext = 1e3 * t_extract
            rows.append(_row("classical", n, rate, ext, 1e3 * t_match, 1e3 * t_rec, 0.0, iters))
            rows.append(_row("regression", n, rate, ext, 0.0, 0.0, 1e3 * t_reg, float("nan")))
            if progress:
                progress(rows[-2:])
    return rows


def _row(pipeline, n, rate, ext, match, rec, reg, iters):
    r = {"pipeline": pipeline, "keypoints": n, "outlier_rate": rate, "extracting_ms": ext,
         "matching_ms": match, "recovering_ms": rec, "regressing_ms": reg, "ransac_iters": iters}
    r["total_ms"] = ext + match + rec + reg
    return r


def rows_to_csv(rows) -> str:
    lines = [",".join(COLUMNS)]
    for r in rows:
        lines.append(",".join(str(r[c]) if isinstance(r[c], (str, int)) else f"{r[c]:.6g}" for c in COLUMNS))
    return "\n".join(lines) + "\n"
