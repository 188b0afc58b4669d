"""Pose-error AUC, threshold precisions, ADD / ADD-S and VCRE, plus report aggregation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateTranslation, EmptyErrors, EmptyModel
from .geometry import CameraIntrinsics, Pose, project, rotation_angle_error, translation_angle_error


def pose_error(pred: Pose, gt: Pose) -> float:
    """Max of rotation and translation-direction errors, in degrees."""
    return max(rotation_angle_error(pred.R, gt.R), translation_angle_error(pred.t, gt.t))


def auc(errors, thresholds=(5.0, 10.0, 20.0)) -> list:
    """Exact area under the empirical recall curve on [0, tau], normalized by tau."""
    e = np.asarray(errors, dtype=float).reshape(-1)
    if e.size == 0:
        raise EmptyErrors("AUC of an empty error list")
    return [float(np.mean(np.clip(1.0 - e / tau, 0.0, None))) for tau in thresholds]


def precision(errors, threshold: float) -> float:
    """Fraction of errors at or below ``threshold``."""
    e = np.asarray(errors, dtype=float).reshape(-1)
    if e.size == 0:
        raise EmptyErrors("precision of an empty error list")
    return float(np.mean(e <= threshold))


def _model(points) -> np.ndarray:
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        raise EmptyModel("model point set is empty")
    return p


def add(model_points, pred: Pose, gt: Pose) -> float:
    p = _model(model_points)
    return float(np.mean(np.linalg.norm(gt.apply(p) - pred.apply(p), axis=1)))


def add_s(model_points, pred: Pose, gt: Pose) -> float:
    """Closest-point variant of ADD for symmetric objects (brute force)."""
    p = _model(model_points)
    a = gt.apply(p)
    b = pred.apply(p)
    d2 = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return float(np.mean(np.sqrt(np.maximum(d2.min(axis=1), 0.0))))


def virtual_grid(n: int = 4, half_extent: float = 0.3, depth: float = 1.5) -> np.ndarray:
    """n^3 grid of points in a cube of side ``2 * half_extent`` centred ``depth`` ahead."""
    s = np.linspace(-half_extent, half_extent, n)
    g = np.stack(np.meshgrid(s, s, s, indexing="ij"), axis=-1).reshape(-1, 3)
    return g + np.array([0.0, 0.0, depth])


VIRTUAL_POINTS = virtual_grid()


def vcre(pred: Pose, gt: Pose, K: CameraIntrinsics, virtual_points=None) -> float:
    """Mean reprojection displacement (px) of virtual points moved by ``pred * gt^-1``."""
    v = VIRTUAL_POINTS if virtual_points is None else np.asarray(virtual_points, float).reshape(-1, 3)
    ident = Pose.identity()
    a = project(v, ident, K)
    b = project(v, pred.compose(gt.inverse()), K)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


# -- reports -----------------------------------------------------------------

COLUMNS = ("rot_deg", "trans_m", "trans_angle_deg", "pose_err_deg", "add_m", "add_s_m", "vcre_px")


@dataclass(frozen=True)
class Thresholds:
    rot_deg: float = 30.0
    trans_m: float = 1.0
    add_m: float = 0.10
    vcre_px: float = 90.0
    reloc_m: float = 0.25
    reloc_deg: float = 5.0
    auc_deg: tuple = (5.0, 10.0, 20.0)


OBJECT_THRESHOLDS = Thresholds(trans_m=0.10)


def sample_errors(pred: Pose, gt: Pose, model_points=None, K: CameraIntrinsics | None = None) -> dict:
    """One per-sample row.  Angular columns are NaN when the gt translation is degenerate,
    and VCRE is NaN when the error transform puts virtual points behind the camera."""
    row = dict.fromkeys(COLUMNS, math.nan)
    row["rot_deg"] = rotation_angle_error(pred.R, gt.R)
    row["trans_m"] = float(np.linalg.norm(pred.t - gt.t))
    try:
        row["trans_angle_deg"] = translation_angle_error(pred.t, gt.t)
        row["pose_err_deg"] = max(row["rot_deg"], row["trans_angle_deg"])
    except DegenerateTranslation:
        pass
    if model_points is not None:
        row["add_m"] = add(model_points, pred, gt)
        row["add_s_m"] = add_s(model_points, pred, gt)
    if K is not None:
        try:
            row["vcre_px"] = vcre(pred, gt, K)
        except BehindCamera:
            pass  # undefined for this prediction; left out of the VCRE aggregates
    return row


def _finite(rows, col):
    v = np.array([r[col] for r in rows], dtype=float)
    return v[np.isfinite(v)]


@dataclass
class EvalReport:
    rows: list
    thresholds: Thresholds = field(default_factory=Thresholds)
    aggregates: dict = field(default_factory=dict)
    degenerate: int = 0

    def to_json(self) -> str:
        return json.dumps({"aggregates": self.aggregates, "degenerate": self.degenerate,
                           "count": len(self.rows), "thresholds": asdict(self.thresholds)},
                          indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("sample",) + COLUMNS)
        for i, r in enumerate(self.rows):
            w.writerow([r.get("sample", i)] + [repr(float(r[c])) for c in COLUMNS])
        return buf.getvalue()

    @staticmethod
    def rows_from_csv(text: str) -> list:
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            row = {c: float(rec[c]) for c in COLUMNS}
            row["sample"] = rec["sample"]
            rows.append(row)
        return rows


def aggregate(rows, thresholds: Thresholds = Thresholds()) -> EvalReport:
    rows = list(rows)
    if not rows:
        raise EmptyErrors("cannot aggregate zero samples")
    agg = {}
    for col in COLUMNS:
        v = _finite(rows, col)
        if v.size:
            agg[f"{col}_median"] = float(np.median(v))
            agg[f"{col}_mean"] = float(np.mean(v))
    rot = _finite(rows, "rot_deg")
    agg[f"acc_rot_le_{thresholds.rot_deg:g}deg"] = precision(rot, thresholds.rot_deg)
    agg[f"acc_trans_le_{thresholds.trans_m:g}m"] = precision(_finite(rows, "trans_m"), thresholds.trans_m)
    for col, thr, name in (("add_m", thresholds.add_m, f"acc_add_le_{thresholds.add_m:g}m"),
                           ("add_s_m", thresholds.add_m, f"acc_add_s_le_{thresholds.add_m:g}m"),
                           ("vcre_px", thresholds.vcre_px, f"acc_vcre_le_{thresholds.vcre_px:g}px")):
        v = _finite(rows, col)
        if v.size:
            agg[name] = precision(v, thr)
    r = np.array([x["rot_deg"] for x in rows], float)
    t = np.array([x["trans_m"] for x in rows], float)
    agg[f"acc_reloc_{thresholds.reloc_m:g}m_{thresholds.reloc_deg:g}deg"] = float(
        np.mean((r <= thresholds.reloc_deg) & (t <= thresholds.reloc_m)))
    pe = _finite(rows, "pose_err_deg")
    if pe.size:
        for tau, a in zip(thresholds.auc_deg, auc(pe, thresholds.auc_deg)):
            agg[f"auc_{tau:g}deg"] = a
    degenerate = int(sum(1 for x in rows if not math.isfinite(x["pose_err_deg"])))
    return EvalReport(rows, thresholds, agg, degenerate)
