import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from srpose_kit import geometry as G
from srpose_kit import metrics as Me
from srpose_kit.checks import K_DEFAULT, random_pose, trapezoid_auc
from srpose_kit.errors import BehindCamera, DegenerateTranslation, EmptyErrors, EmptyModel

seeds = st.integers(0, 2 ** 32 - 1)
errors = st.lists(st.floats(0, 90, allow_nan=False), min_size=1, max_size=50)


def test_pose_error_examples():
    p = G.Pose(np.eye(3), [0, 0, 1])
    assert Me.pose_error(p, p) == 0.0
    pred = G.Pose(G.axis_angle_to_rotation([1, 0, 0], np.radians(3)),
                  G.axis_angle_to_rotation([0, 1, 0], np.radians(7)) @ [0, 0, 1])
    assert Me.pose_error(pred, p) == pytest.approx(7.0, abs=1e-9)
    with pytest.raises(DegenerateTranslation):
        Me.pose_error(p, G.Pose.identity())


def test_auc_closed_forms():
    assert Me.auc([0.0, 0.0]) == [1.0, 1.0, 1.0]
    assert Me.auc([2.5], [5.0]) == [0.5]
    with pytest.raises(EmptyErrors):
        Me.auc([])


def test_auc_matches_trapezoid_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        e = rng.exponential(8.0, size=int(rng.integers(1, 100)))
        for tau, a in zip((5.0, 10.0, 20.0), Me.auc(e)):
            assert abs(a - trapezoid_auc(e, tau, 200001)) < 1e-6


@given(errors)
def test_auc_monotone_and_bounded(e):
    a = Me.auc(e, [1.0, 5.0, 10.0, 20.0, 45.0])
    assert all(0.0 <= x <= 1.0 for x in a)
    assert all(x <= y + 1e-15 for x, y in zip(a, a[1:]))


def test_add_examples():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    gt = G.Pose.identity()
    assert Me.add(pts, gt, gt) == 0.0 and Me.add_s(pts, gt, gt) == 0.0
    assert Me.add(pts, G.Pose(np.eye(3), [0.02, 0, 0]), gt) == pytest.approx(0.02, abs=1e-15)
    with pytest.raises(EmptyModel):
        Me.add(np.zeros((0, 3)), gt, gt)
    with pytest.raises(EmptyModel):
        Me.add_s([], gt, gt)


def test_add_three_point_hand_case():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    rz = G.Pose(G.axis_angle_to_rotation([0, 0, 1], np.pi / 2), np.zeros(3))
    # (1,0,0) -> (0,1,0): 1 from the origin, sqrt(2) from its own image
    # (0,2,0) -> (-2,0,0): 2 from the origin, sqrt(8) from its own image
    assert Me.add(pts, rz, G.Pose.identity()) == pytest.approx((math.sqrt(2) + math.sqrt(8)) / 3, abs=1e-15)
    assert Me.add_s(pts, rz, G.Pose.identity()) == pytest.approx((0 + 1 + 1) / 3, abs=1e-15)


def test_symmetric_square_add_s_vanishes():
    square = np.array([[1.0, 1.0, 0.0], [-1.0, 1.0, 0.0], [-1.0, -1.0, 0.0], [1.0, -1.0, 0.0]])
    rz = G.Pose(G.axis_angle_to_rotation([0, 0, 1], np.pi / 2), np.zeros(3))
    assert Me.add_s(square, rz, G.Pose.identity()) < 1e-12
    assert Me.add(square, rz, G.Pose.identity()) > 1.0


@given(seeds)
def test_add_s_le_add(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(int(rng.integers(1, 15)), 3))
    p, q = random_pose(rng, np.pi), random_pose(rng, np.pi)
    assert Me.add_s(m, p, q) <= Me.add(m, p, q) + 1e-12


def test_vcre_pinhole_closed_form():
    z, delta = 2.0, 0.05
    v = Me.vcre(G.Pose(np.eye(3), [delta, 0, 0]), G.Pose.identity(), K_DEFAULT, [[0.0, 0.0, z]])
    assert abs(v - K_DEFAULT.fx * delta / z) < 1e-9
    p = random_pose(np.random.default_rng(0), 0.2)
    assert Me.vcre(p, p, K_DEFAULT) < 1e-9
    assert Me.VIRTUAL_POINTS.shape == (64, 3)


@given(seeds)
def test_metrics_invariant_under_frame_change(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_pose(rng, 0.5), random_pose(rng, 0.5)
    F = random_pose(rng, np.pi)
    # re-expressing both relative poses in another frame conjugates them
    pred2, gt2 = F.compose(pred).compose(F.inverse()), F.compose(gt).compose(F.inverse())
    m = rng.normal(size=(6, 3))
    assert abs(G.rotation_angle_error(pred.R, gt.R) - G.rotation_angle_error(pred2.R, gt2.R)) < 1e-9
    assert abs(Me.add(m, pred, gt) - Me.add(F.apply(m), pred2, gt2)) < 1e-9
    assert abs(Me.add_s(m, pred, gt) - Me.add_s(F.apply(m), pred2, gt2)) < 1e-9
    assert Me.add(m, gt, gt) == 0.0


def test_aggregate_examples():
    rows = [dict.fromkeys(Me.COLUMNS, math.nan) for _ in range(4)]
    for r, v in zip(rows, (1.0, 2.0, 3.0, 100.0)):
        r.update(rot_deg=v, trans_m=0.0, trans_angle_deg=0.0, pose_err_deg=v)
    rep = Me.aggregate(rows, Me.Thresholds(rot_deg=3.0))
    assert rep.aggregates["rot_deg_median"] == 2.5
    assert rep.aggregates["acc_rot_le_3deg"] == 0.75
    one = Me.aggregate(rows[:1])
    assert one.aggregates["rot_deg_median"] == one.aggregates["rot_deg_mean"] == 1.0
    with pytest.raises(EmptyErrors):
        Me.aggregate([])


def test_degenerate_samples_counted_and_excluded():
    gt0 = G.Pose(np.eye(3), np.zeros(3))
    good = G.Pose(np.eye(3), [0, 0, 1])
    rows = [Me.sample_errors(good, gt0), Me.sample_errors(good, good)]
    rep = Me.aggregate(rows)
    assert rep.degenerate == 1
    assert rep.aggregates["auc_5deg"] == 1.0
    assert json.loads(rep.to_json())["degenerate"] == 1


def test_report_csv_round_trip():
    rng = np.random.default_rng(3)
    rows = []
    for _ in range(25):
        gt = random_pose(rng, 0.6)
        pred = random_pose(rng, 0.6)
        rows.append(Me.sample_errors(pred, gt, rng.normal(size=(5, 3)), K_DEFAULT))
    rep = Me.aggregate(rows)
    back = Me.aggregate(Me.EvalReport.rows_from_csv(rep.to_csv()))
    assert back.aggregates.keys() == rep.aggregates.keys()
    for k, v in rep.aggregates.items():
        assert abs(back.aggregates[k] - v) <= 1e-12


def test_vcre_behind_camera_left_out_of_row():
    gt = G.Pose.identity()
    flipped = G.Pose(G.axis_angle_to_rotation([0, 1, 0], np.pi), [0, 0, 0.5])
    with pytest.raises(BehindCamera):
        Me.vcre(flipped, gt, K_DEFAULT)
    row = Me.sample_errors(flipped, G.Pose(np.eye(3), [0, 0, 1]), K=K_DEFAULT)
    assert math.isnan(row["vcre_px"]) and math.isfinite(row["rot_deg"])
