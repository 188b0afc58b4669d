"""Self-verification suite behind the ``verify`` command.

Each check returns ``(ok, detail)``.  Checks are grouped so ``--filter`` can
select a subset by group or name.
"""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from . import baseline as B
from . import geometry as G
from . import metrics as Me
from . import model as Mo
from . import tensor as T
from .data import GenConfig, generate_pair
from .errors import ConfigMismatch
from .keypoints import KeypointSet, ObjectPrompt


# -- helpers ------------------------------------------------------------------

def grad_check(fn, arrays, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences of ``fn(*tensors)``."""
    params = [T.parameter(a.copy()) for a in arrays]
    with T.Tape():
        out = fn(*params)
    T.backward(out)
    worst = 0.0
    for p in params:
        def f():
            return float(fn(*[T.Tensor(q.data) for q in params]).data)
        num = T.numerical_gradient(f, p.data, eps)
        worst = max(worst, T.relative_error(p.grad, num))
    return worst


def random_pose(rng, max_angle=np.pi / 3, baseline=(0.2, 1.0)) -> G.Pose:
    R = G.random_rotation(rng, max_angle)
    c = rng.normal(size=3)
    c *= rng.uniform(*baseline) / np.linalg.norm(c)
    return G.Pose(R, -R @ c)


def exact_correspondences(rng, pose, K1, K2, n=20):
    """``n`` points seen with positive depth by both cameras, projected without noise."""
    pts = []
    while len(pts) < n:
        X = np.c_[rng.uniform(-2, 2, (4 * n, 2)), rng.uniform(3, 8, 4 * n)]
        ok = pose.apply(X)[:, 2] > 0.5
        pts.extend(X[ok])
    X = np.array(pts[:n])
    return G.project(X, G.Pose.identity(), K1), G.project(X, pose, K2), X


def _kps(coords, d=4):
    return KeypointSet(coords, np.ones((len(coords), d)) / np.sqrt(d))


def _matches(n):
    return B.MatchSet(np.arange(n), np.arange(n), np.ones(n))


K_DEFAULT = G.CameraIntrinsics(500.0, 500.0, 320.0, 240.0)


# -- geometry -----------------------------------------------------------------

def check_geometry_round_trip(trials: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    K2 = G.CameraIntrinsics(620.0, 600.0, 300.0, 250.0)
    worst_r = worst_t = 0.0
    t0 = time.perf_counter()
    for _ in range(trials):
        pose = random_pose(rng)
        q1, q2, _ = exact_correspondences(rng, pose, K_DEFAULT, K2, int(rng.integers(20, 41)))
        k1, k2 = _kps(q1), _kps(q2)
        m = _matches(len(q1))
        E = B.eight_point(m, k1, k2, K_DEFAULT, K2)
        est = B.decompose_essential(E, m, k1, k2, K_DEFAULT, K2)
        worst_r = max(worst_r, G.rotation_angle_error(est.R, pose.R))
        worst_t = max(worst_t, G.translation_angle_error(est.t, pose.t))
    elapsed = time.perf_counter() - t0
    ok = worst_r < 1e-5 and worst_t < 1e-5 and elapsed < 10.0
    return ok, f"max rot {worst_r:.2e} deg, max trans {worst_t:.2e} deg, {elapsed:.1f}s"


def check_epipolar_consistency(pairs: int = 50, seed: int = 0):
    cfg = GenConfig(pairs=pairs, seed=seed, noise_px=0.0, noise_desc=0.0, clutter=0.0)
    worst = 0.0
    for i in range(pairs):
        s = generate_pair(cfg, "train", i)
        E = G.essential_from_pose(s.gt)
        j1 = {int(v): k for k, v in enumerate(s.kps1.ids) if v >= 0}
        idx = [(j1[int(v)], k) for k, v in enumerate(s.kps2.ids) if v >= 0 and int(v) in j1]
        if not idx:
            continue
        a, b = np.array(idx).T
        r = G.epipolar_residual(E, s.kps1.coords[a], s.kps2.coords[b], s.K1, s.K2)
        worst = max(worst, float(np.max(np.abs(r))))
    return worst < 1e-10, f"max |residual| {worst:.2e} over {pairs} pairs"


def check_rotation_manifold(n: int = 10000, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst_o = worst_d = 0.0
    for r in rng.normal(size=(n, 6)):
        R = G.gram_schmidt_6d(r)
        worst_o = max(worst_o, float(np.abs(R.T @ R - np.eye(3)).max()))
        worst_d = max(worst_d, abs(np.linalg.det(R) - 1.0))
    return worst_o < 1e-9 and worst_d < 1e-9, f"max |RtR-I| {worst_o:.1e}, max |det-1| {worst_d:.1e}"


# -- tensor -------------------------------------------------------------------

def primitive_cases(rng):
    """(name, fn, inputs) for every differentiable primitive."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    c = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    cosv = rng.uniform(-0.9, 0.9, size=(5,))
    mask = np.array([[True, True, False, True]] * 3)
    rowmask = np.array([True, False, True])
    w = rng.normal(size=(3, 4))
    return [
        ("matmul", lambda x, y: (x @ y).sum(), [a, b]),
        ("add", lambda x, y: ((x + y) * w).sum(), [a, c]),
        ("add_broadcast", lambda x, y: ((x + y) * w).sum(), [a, rng.normal(size=(4,))]),
        ("sub", lambda x, y: ((x - y) * w).sum(), [a, c]),
        ("mul", lambda x, y: (x * y).sum(), [a, c]),
        ("div", lambda x, y: (x / y).sum(), [a, pos]),
        ("relu", lambda x: (T.relu(x) * w).sum(), [a + np.sign(a) * 0.1]),
        ("sqrt", lambda x: (T.sqrt(x) * w).sum(), [pos]),
        ("arccos", lambda x: T.arccos(x).sum(), [cosv]),
        ("huber", lambda x: (T.huber(x * 2.0, 1.0) * w).sum(), [a]),
        ("sum_axis", lambda x: (T.tsum(x, axis=0) * w[0]).sum(), [a]),
        ("mean_over_rows", lambda x: (T.mean_over_rows(x[None], rowmask[None]) * w[0]).sum(), [a]),
        ("reshape", lambda x: (x.reshape(4, 3) * w.reshape(4, 3)).sum(), [a]),
        ("transpose", lambda x: (x.transpose() * w.T).sum(), [a]),
        ("getitem", lambda x: (x[1:, ::2] * w[1:, ::2]).sum(), [a]),
        ("concat", lambda x, y: (T.concat([x, y], axis=0)[1:5] * w[0]).sum(), [a, c]),
        ("cross", lambda x, y: (T.cross(x, y) * w[:, :3]).sum(), [a[:, :3], c[:, :3]]),
        ("softmax_rows", lambda x: (T.softmax_rows(x, mask) * w).sum(), [a]),
    ]


def check_gradient_primitives(seed: int = 0):
    rng = np.random.default_rng(seed)
    worst, name = 0.0, ""
    for nm, fn, arrays in primitive_cases(rng):
        e = grad_check(fn, arrays)
        if e > worst:
            worst, name = e, nm
    return worst < 1e-5, f"max relative error {worst:.2e} ({name})"


def micro_setup(seed: int = 0, n: int = 4):
    rng = np.random.default_rng(seed)
    cfg = Mo.PRESETS["micro"]
    params = Mo.init_params(cfg, seed)
    for p in params.values():
        p.data += rng.normal(scale=0.1, size=p.shape)
    pose = random_pose(rng, np.pi / 6)
    q1, q2, _ = exact_correspondences(rng, pose, K_DEFAULT, K_DEFAULT, n)
    d1 = rng.normal(size=(n, cfg.d))
    d2 = d1 + 0.1 * rng.normal(size=(n, cfg.d))
    pair = _Pair(KeypointSet(q1, d1), KeypointSet(q2, d2), K_DEFAULT, K_DEFAULT)
    return cfg, params, pair, pose


class _Pair:
    def __init__(self, kps1, kps2, K1, K2, prompt=None, gt=None):
        self.kps1, self.kps2, self.K1, self.K2, self.prompt, self.gt = kps1, kps2, K1, K2, prompt, gt


def check_gradient_end_to_end(seed: int = 0):
    from .training import LossWeights, loss_total
    cfg, params, pair, pose = micro_setup(seed)
    batch = Mo.make_batch([pair], cfg)
    names = sorted(params)

    def loss():
        return loss_total(Mo.forward_batch(batch, params, cfg), pose.R[None], pose.t[None],
                          LossWeights()).sum()

    with T.Tape():
        L = loss()
    for p in params.values():
        p.grad = None
    T.backward(L)
    worst, where = 0.0, ""
    for k in names:
        p = params[k]
        num = T.numerical_gradient(lambda: float(loss().data), p.data, 1e-6)
        e = T.relative_error(p.grad, num)
        if e > worst:
            worst, where = e, k
    return worst < 1e-4, f"max relative error {worst:.2e} ({where}) over {len(names)} tensors"


# -- model ----------------------------------------------------------------------

def _random_model_pair(rng, cfg, n_valid, prompt=False):
    n1 = n_valid
    c1 = rng.uniform([0, 0], [640, 480], size=(n1, 2))
    c2 = rng.uniform([0, 0], [640, 480], size=(n1, 2))
    d1 = rng.normal(size=(n1, cfg.d))
    d2 = d1[rng.permutation(n1)] + 0.05 * rng.normal(size=(n1, cfg.d))
    box = ObjectPrompt((100.0, 80.0), (500.0, 400.0)) if prompt else None
    if prompt:
        c1[0] = (300.0, 240.0)  # at least one keypoint inside
    return _Pair(KeypointSet(c1, d1), KeypointSet(c2, d2), K_DEFAULT, K_DEFAULT, box)


def check_padding_invariance(pairs: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    cfg = Mo.PRESETS["toy"]
    params = Mo.init_params(cfg, seed)
    worst = worst_p = 0.0
    for i in range(pairs):
        pair = _random_model_pair(rng, cfg, int(rng.integers(4, 40)), prompt=(i % 2 == 1))
        n = max(len(pair.kps1), len(pair.kps2))
        a = Mo.forward(pair, params, cfg, n)
        b = Mo.forward(pair, params, cfg, n + 32)
        worst = max(worst, np.abs(a[0] - b[0]).max(), np.abs(a[1] - b[1]).max())
        if pair.prompt is not None:
            inside = pair.prompt.contains(pair.kps1.coords)
            pre = _Pair(KeypointSet(pair.kps1.coords[inside], pair.kps1.descriptors[inside]),
                        pair.kps2, pair.K1, pair.K2)
            c = Mo.forward(pre, params, cfg, n)
            worst_p = max(worst_p, np.abs(a[0] - c[0]).max(), np.abs(a[1] - c[1]).max())
    ok = worst < 1e-9 and worst_p < 1e-9
    return ok, f"padding max diff {worst:.1e}, prompt max diff {worst_p:.1e}"


def check_guidance_identity(pairs: int = 10, seed: int = 0):
    rng = np.random.default_rng(seed)
    cfg = Mo.PRESETS["toy"]
    off = replace(cfg, guidance_enabled=False)
    params = Mo.init_params(cfg, seed)
    same = True
    for _ in range(pairs):
        pair = _random_model_pair(rng, cfg, int(rng.integers(4, 40)))
        a = Mo.forward(pair, params, cfg, similarity=1.0)
        b = Mo.forward(pair, params, off)
        same &= np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    return bool(same), "bit-identical" if same else "outputs differ"


# -- metrics ------------------------------------------------------------------

def trapezoid_auc(errors, tau, points: int = 10001):
    x = np.linspace(0.0, tau, points)
    e = np.sort(np.asarray(errors, float))
    y = np.searchsorted(e, x, side="right") / e.size
    return float(np.sum((y[1:] + y[:-1]) * 0.5 * np.diff(x)) / tau)


def check_metric_oracles(seed: int = 0):
    rng = np.random.default_rng(seed)
    worst_auc = 0.0
    for _ in range(100):
        errs = rng.exponential(8.0, size=int(rng.integers(5, 200)))
        # keep errors off the trapezoid grid so the step function integrates cleanly
        for tau, a in zip((5.0, 10.0, 20.0), Me.auc(errs, (5.0, 10.0, 20.0))):
            worst_auc = max(worst_auc, abs(a - trapezoid_auc(errs, tau, 200001)))
    # 3-point hand cases
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    gt = G.Pose.identity()
    pred = G.Pose(np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]), np.zeros(3))
    # pred maps (1,0,0)->(0,1,0) and (0,2,0)->(-2,0,0); nearest-point distances are 0, 1, 1
    add_hand = (0.0 + np.sqrt(2.0) + np.sqrt(8.0)) / 3.0
    adds_hand = 2.0 / 3.0
    add_ok = abs(Me.add(pts, pred, gt) - add_hand) < 1e-15
    adds_ok = abs(Me.add_s(pts, pred, gt) - adds_hand) < 1e-15
    order_ok = True
    for _ in range(1000):
        m = rng.normal(size=(int(rng.integers(1, 12)), 3))
        p, q = random_pose(rng, np.pi), random_pose(rng, np.pi)
        order_ok &= Me.add_s(m, p, q) <= Me.add(m, p, q) + 1e-12
    # single on-axis point, x-translation error delta at depth z -> fx * delta / z
    z, delta = 2.0, 0.05
    v = Me.vcre(G.Pose(np.eye(3), [delta, 0, 0]), G.Pose.identity(), K_DEFAULT, [[0.0, 0.0, z]])
    vcre_err = abs(v - K_DEFAULT.fx * delta / z)
    ok = worst_auc < 1e-6 and add_ok and adds_ok and order_ok and vcre_err < 1e-9
    return ok, (f"auc vs trapezoid {worst_auc:.1e}, add hand {add_ok}, add_s hand {adds_ok}, "
                f"add_s<=add {order_ok}, vcre {vcre_err:.1e}")


# -- baseline -----------------------------------------------------------------

def outlier_trial(rng, n=100, rate=0.3, seed=0):
    pose = random_pose(rng, np.pi / 4)
    q1, q2, _ = exact_correspondences(rng, pose, K_DEFAULT, K_DEFAULT, n)
    bad = rng.choice(n, size=int(round(rate * n)), replace=False)
    q2 = q2.copy()
    q2[bad] = rng.uniform([0, 0], [640, 480], size=(len(bad), 2))
    res = B.ransac_essential(_matches(n), _kps(q1), _kps(q2), K_DEFAULT, K_DEFAULT, B.RansacConfig(seed=seed))
    return G.rotation_angle_error(res.pose.R, pose.R)


def check_ransac_robustness(trials: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    errs = np.array([outlier_trial(rng, seed=i) for i in range(trials)])
    good = int(np.sum(errs < 0.5))
    return good >= 99, f"{good}/{trials} trials under 0.5 deg (worst {errs.max():.3g} deg)"


# -- checkpoint -----------------------------------------------------------------

def check_checkpoint(path, expected: Mo.ModelConfig | None = None):
    try:
        Mo.load_checkpoint(path, expected)
    except ConfigMismatch as e:
        return False, f"config mismatch: {e}"
    except (OSError, ValueError) as e:
        return False, f"unreadable checkpoint: {e}"
    return True, "loads and matches"


CHECKS = [
    ("geometry", "round_trip", check_geometry_round_trip),
    ("geometry", "epipolar_consistency", check_epipolar_consistency),
    ("geometry", "rotation_manifold", check_rotation_manifold),
    ("tensor", "gradient_primitives", check_gradient_primitives),
    ("tensor", "gradient_end_to_end", check_gradient_end_to_end),
    ("model", "padding_prompt_invariance", check_padding_invariance),
    ("model", "guidance_identity", check_guidance_identity),
    ("metrics", "metric_oracles", check_metric_oracles),
    ("baseline", "ransac_robustness", check_ransac_robustness),
]


def run_checks(filter_: str | None = None, checkpoint=None, report=print):
    """Run the selected checks; returns the list of ``(name, ok, detail, seconds)``."""
    results = []
    selected = [c for c in CHECKS if not filter_ or filter_ in (c[0], c[1]) or filter_ in f"{c[0]}.{c[1]}"]
    if checkpoint is not None:
        selected.append(("checkpoint", "checkpoint", lambda: check_checkpoint(checkpoint)))
    for group, name, fn in selected:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        dt = time.perf_counter() - t0
        results.append((f"{group}.{name}", bool(ok), detail, dt))
        if report:
            report(f"{'PASS' if ok else 'FAIL'}  {group}.{name}  ({dt:.1f}s)  {detail}")
    return results
