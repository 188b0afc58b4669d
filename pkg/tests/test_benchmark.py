import numpy as np

from srpose_kit import model as Mo
from srpose_kit.benchmark import (
    COLUMNS,
    STAGES,
    bench_config,
    bench_pair,
    inject_outliers,
    median_time,
    rows_to_csv,
    run_benchmark,
)

TOY = Mo.PRESETS["toy"]


def test_median_time_counts_calls():
    calls = []
    t, out = median_time(lambda: calls.append(1) or len(calls), reps=5, warmup=2)
    assert len(calls) == 7 and out == 7 and t >= 0


def test_inject_outliers_breaks_exactly_the_requested_rows():
    pair, _ = bench_pair(bench_config(128, TOY.d))
    k = pair.kps2
    out = inject_outliers(k, 0.25, np.random.default_rng(0))
    changed = np.any(out.descriptors != k.descriptors, axis=1)
    assert changed.sum() == round(0.25 * k.num_valid)
    assert np.all(out.ids[changed] == -1)
    assert np.array_equal(out.coords, k.coords)
    assert inject_outliers(k, 0.0, np.random.default_rng(0)).descriptors.tolist() == k.descriptors.tolist()


def test_bench_pairs_fill_requested_keypoints():
    for n in (256, 1024):
        pair, _ = bench_pair(bench_config(n, TOY.d))
        assert pair.kps1.num_valid == n and pair.kps2.num_valid == n


def test_report_has_stage_decomposition_and_trends():
    params = Mo.init_params(TOY, 0)
    rows = run_benchmark(params, TOY, keypoint_counts=(512,), outlier_rates=(0.0, 0.2, 0.4), reps=7, warmup=1)
    assert set(STAGES) <= set(COLUMNS)
    header = rows_to_csv(rows).splitlines()[0].split(",")
    assert all(s in header for s in STAGES)
    classical = [r for r in rows if r["pipeline"] == "classical"]
    regression = [r for r in rows if r["pipeline"] == "regression"]
    rec = [r["recovering_ms"] for r in classical]
    assert rec[0] <= rec[1] <= rec[2]
    reg = [r["regressing_ms"] for r in regression]
    # forward cost does not depend on the outlier rate; slack covers timer noise
    assert max(reg) <= 1.5 * min(reg)
    for r in rows:
        assert abs(r["total_ms"] - sum(r[s] for s in STAGES)) < 1e-9
