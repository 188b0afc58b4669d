"""Classical matcher pipeline: mutual-NN matching, normalized 8-point, RANSAC,
cheirality-checked decomposition, and Procrustes alignment."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheiralityAmbiguous,
    DegenerateConfiguration,
    DegenerateGeometry,
    InsufficientMatches,
    NoConsensus,
)
from .geometry import CameraIntrinsics, Pose, calibrate, lift
from .keypoints import KeypointSet

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class MatchSet:
    idx1: np.ndarray
    idx2: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.idx1 = np.asarray(self.idx1, dtype=np.int64).reshape(-1)
        self.idx2 = np.asarray(self.idx2, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)

    def __len__(self):
        return len(self.idx1)

    def subset(self, mask) -> "MatchSet":
        return MatchSet(self.idx1[mask], self.idx2[mask], self.scores[mask])


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 1000
    inlier_threshold: float = 1e-3
    seed: int = 0
    confidence: float = 0.999
    sample_size: int = 8

    def __post_init__(self):
        if self.max_iters < 1 or self.inlier_threshold <= 0:
            raise ValueError("max_iters must be >= 1 and inlier_threshold > 0")
        if self.sample_size < 8:
            raise ValueError("the 8-point solver needs samples of at least 8")


class RansacResult:
    def __init__(self, pose, inliers, iterations, elapsed):
        self.pose = pose
        self.inliers = inliers
        self.iterations = iterations
        self.elapsed = elapsed

    def __iter__(self):
        # unpacks as (pose, inlier_mask)
        return iter((self.pose, self.inliers))


def match_mutual_nn(kps1: KeypointSet, kps2: KeypointSet, ratio: float = 0.8) -> MatchSet:
    """Mutual nearest neighbours under cosine distance, filtered by Lowe's ratio test."""
    if kps1.dim != kps2.dim:
        raise ValueError(f"descriptor widths differ: {kps1.dim} vs {kps2.dim}")
    v1 = np.flatnonzero(kps1.valid_mask)
    v2 = np.flatnonzero(kps2.valid_mask)
    if len(v1) == 0 or len(v2) == 0 or ratio <= 0:
        return MatchSet([], [], [])
    d1 = kps1.descriptors[v1]
    d2 = kps2.descriptors[v2]
    d1 = d1 / np.linalg.norm(d1, axis=1, keepdims=True)
    d2 = d2 / np.linalg.norm(d2, axis=1, keepdims=True)
    sim = d1 @ d2.T
    dist = 1.0 - sim
    nn12 = dist.argmin(axis=1)
    nn21 = dist.argmin(axis=0)
    rows = np.arange(len(v1))
    mutual = nn21[nn12] == rows
    if len(v2) > 1:
        part = np.partition(dist, 1, axis=1)
        best, second = part[:, 0], part[:, 1]
        passes = best < ratio * second
    else:
        passes = np.ones(len(v1), bool)
    keep = mutual & passes
    return MatchSet(v1[rows[keep]], v2[nn12[keep]], sim[rows[keep], nn12[keep]])


def _calibrated_rays(matches: MatchSet, kps1, kps2, K1, K2):
    x1 = lift(calibrate(kps1.coords[matches.idx1], K1))
    x2 = lift(calibrate(kps2.coords[matches.idx2], K2))
    return x1, x2


def _normalizer(x):
    c = x[:, :2].mean(axis=0)
    s = np.sqrt(2.0) / max(np.mean(np.linalg.norm(x[:, :2] - c, axis=1)), 1e-300)
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def project_to_essential(E) -> np.ndarray:
    U, s, Vt = np.linalg.svd(E)
    sigma = 0.5 * (s[0] + s[1])
    return U @ np.diag([sigma, sigma, 0.0]) @ Vt


def eight_point_rays(x1, x2, rank_tol: float = 1e-9) -> np.ndarray:
    """Essential matrix with ``x2^T E x1 = 0`` from (N, 3) calibrated rays, Hartley-normalized."""
    n = len(x1)
    if n < 8:
        raise InsufficientMatches(f"8-point needs >= 8 correspondences, got {n}")
    T1, T2 = _normalizer(x1), _normalizer(x2)
    a = x1 @ T1.T
    b = x2 @ T2.T
    A = (b[:, :, None] * a[:, None, :]).reshape(n, 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    # a one-dimensional null space needs the 8th singular value well above zero
    if s[7] <= rank_tol * s[0]:
        raise DegenerateConfiguration(f"design matrix rank-deficient (s8/s1 = {s[7] / s[0]:.3g})")
    En = Vt[-1].reshape(3, 3)
    E = T2.T @ En @ T1
    E = project_to_essential(E)
    return E / np.linalg.norm(E)


def eight_point(matches: MatchSet, kps1, kps2, K1: CameraIntrinsics, K2: CameraIntrinsics) -> np.ndarray:
    if len(matches) < 8:
        raise InsufficientMatches(f"8-point needs >= 8 matches, got {len(matches)}")
    return eight_point_rays(*_calibrated_rays(matches, kps1, kps2, K1, K2))


def _depths(R, t, x1, x2):
    """Least-squares depths (z1, z2) with ``z2 x2 = z1 R x1 + t`` for every ray pair."""
    a = x1 @ R.T  # R x1
    # normal equations of [a, -x2] [z1, z2]^T = -t
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", x2, x2)
    ab = np.einsum("ij,ij->i", a, x2)
    at = a @ t
    bt = x2 @ t
    det = aa * bb - ab * ab
    det = np.where(np.abs(det) > 1e-300, det, 1e-300)
    z1 = (-at * bb + ab * bt) / det
    z2 = (aa * bt - ab * at) / det
    return z1, z2


def pose_candidates(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def decompose_rays(E, x1, x2) -> Pose:
    if len(x1) < 1:
        raise InsufficientMatches("cheirality voting needs at least one match")
    cands = pose_candidates(E)
    counts = []
    for R, t in cands:
        z1, z2 = _depths(R, t, x1, x2)
        counts.append(int(np.sum((z1 > 0) & (z2 > 0))))
    order = np.argsort(counts, kind="stable")[::-1]
    if counts[order[0]] == counts[order[1]]:
        raise CheiralityAmbiguous(f"cheirality tie between candidates: counts {counts}")
    R, t = cands[order[0]]
    return Pose(R, t / np.linalg.norm(t))


def decompose_essential(E, matches: MatchSet, kps1, kps2, K1, K2) -> Pose:
    """Pick the (R, t) candidate with the most points in front of both cameras; ``|t| = 1``."""
    return decompose_rays(np.asarray(E, float), *_calibrated_rays(matches, kps1, kps2, K1, K2))


def sampson_distance(E, x1, x2) -> np.ndarray:
    """First-order geometric error of ``x2^T E x1``, in calibrated units."""
    Ex1 = x1 @ E.T
    Etx2 = x2 @ E
    r = np.einsum("ij,ij->i", x2, Ex1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return np.abs(r) / np.sqrt(np.maximum(den, 1e-300))


def iterations_needed(inlier_ratio: float, k: int, confidence: float) -> float:
    """Draws needed to hit an all-inlier sample of size ``k`` with probability ``confidence``."""
    p_good = inlier_ratio ** k
    if p_good >= 1.0:
        return 1
    # log1p keeps tiny good-sample probabilities from rounding to zero
    log_miss = math.log1p(-p_good)
    if log_miss == 0.0:
        return math.inf
    return math.ceil(math.log1p(-confidence) / log_miss)


def ransac_rays(x1, x2, cfg: RansacConfig = RansacConfig()):
    n = len(x1)
    if n < 8:
        raise InsufficientMatches(f"RANSAC needs >= 8 matches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    start = time.perf_counter()
    best = None  # (count, -mean residual, -iteration, mask)
    needed = cfg.max_iters
    it = 0
    k = min(cfg.sample_size, n)
    while it < min(needed, cfg.max_iters):
        sample = rng.choice(n, size=k, replace=False)
        it += 1
        try:
            E = eight_point_rays(x1[sample], x2[sample])
        except DegenerateConfiguration:
            continue
        d = sampson_distance(E, x1, x2)
        mask = d < cfg.inlier_threshold
        count = int(mask.sum())
        if count == 0:
            continue
        key = (count, -float(d[mask].mean()))
        if best is None or key > best[0]:
            best = (key, mask)
            needed = max(it, iterations_needed(count / n, k, cfg.confidence))
    if best is None or best[0][0] < 8:
        raise NoConsensus(f"best consensus set has {0 if best is None else best[0][0]} < 8 inliers")
    mask = best[1]
    E = eight_point_rays(x1[mask], x2[mask])
    pose = decompose_rays(E, x1[mask], x2[mask])
    return RansacResult(pose, mask, it, time.perf_counter() - start)


def ransac_essential(matches: MatchSet, kps1, kps2, K1, K2, cfg: RansacConfig = RansacConfig()) -> RansacResult:
    """Robust pose from matches.  Deterministic given ``cfg.seed``."""
    if len(matches) < 8:
        raise InsufficientMatches(f"RANSAC needs >= 8 matches, got {len(matches)}")
    return ransac_rays(*_calibrated_rays(matches, kps1, kps2, K1, K2), cfg)


def procrustes_pose(p1, p2) -> Pose:
    """Rigid (R, t) minimizing ``sum |R p1 + t - p2|^2`` (Kabsch, reflection-corrected)."""
    p1 = np.asarray(p1, dtype=float).reshape(-1, 3)
    p2 = np.asarray(p2, dtype=float).reshape(-1, 3)
    if len(p1) != len(p2):
        raise ValueError("point sets differ in length")
    if len(p1) < 3:
        raise DegenerateGeometry("need at least 3 correspondences")
    c1, c2 = p1.mean(axis=0), p2.mean(axis=0)
    a, b = p1 - c1, p2 - c2
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometry("points are coincident or collinear")
    U, _, Vt = np.linalg.svd(a.T @ b)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Pose(R, c2 - R @ c1)
