"""Synthetic two-view pair generation and the on-disk dataset format."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyView, ParseError
from .geometry import CameraIntrinsics, Pose, axis_angle_to_rotation
from .keypoints import (
    DetectorNoise,
    KeypointSet,
    ObjectPrompt,
    SyntheticScene,
    load_keypoint_file,
    pad_to,
    random_descriptors,
    save_keypoint_file,
    synthetic_detect,
)

DATASET_VERSION = "SRPOSE-DATA v1"
SCENARIOS = {"c2w": "camera_to_world", "o2c": "object_to_camera"}
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class GenConfig:
    scenario: str = "c2w"
    pairs: int = 2000
    val_pairs: int = 200
    test_pairs: int = 0
    seed: int = 0
    d: int = 32
    n_keypoints: int = 64
    noise_px: float = 0.5
    noise_desc: float = 0.05
    clutter: float = 0.2
    max_rot_deg: float = 45.0
    min_rot_deg: float = 0.0
    image_w: int = 640
    image_h: int = 480
    fx_min: float = 500.0
    fx_max: float = 500.0
    scene_points: int = 120
    # camera-to-world scene: a cone of points in front of the first camera
    scene_near: float = 2.0
    scene_far: float = 6.0
    scene_cone_deg: float = 50.0
    fixation_min: float = 3.0
    fixation_max: float = 8.0
    baseline_min: float = 0.3
    baseline_max: float = 1.0
    baseline_jitter: float = 0.05
    min_shared: int = 24
    # object-to-camera scene
    scene_depth: float = 3.0
    scene_radius: float = 1.2

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {sorted(SCENARIOS)}, got {self.scenario!r}")
        if min(self.pairs, self.val_pairs, self.test_pairs) < 0:
            raise ConfigError("pair counts must be nonnegative")
        if not 0 <= self.clutter < 1:
            raise ConfigError("clutter fraction must be in [0, 1)")
        if not 0 <= self.min_rot_deg <= self.max_rot_deg <= 180:
            raise ConfigError("need 0 <= min_rot_deg <= max_rot_deg <= 180")
        if not 0 < self.fx_min <= self.fx_max:
            raise ConfigError("need 0 < fx_min <= fx_max")
        if self.n_keypoints < 1 or self.d < 1 or self.scene_points < 1:
            raise ConfigError("n_keypoints, d and scene_points must be positive")
        if not 0 < self.scene_near <= self.scene_far or not 0 < self.scene_cone_deg < 90:
            raise ConfigError("need 0 < scene_near <= scene_far and 0 < scene_cone_deg < 90")
        if not 0 < self.baseline_min <= self.baseline_max or self.fixation_min > self.fixation_max:
            raise ConfigError("need 0 < baseline_min <= baseline_max and fixation_min <= fixation_max")
        if self.noise_px < 0 or self.noise_desc < 0:
            raise ConfigError("noise levels must be nonnegative")

    @property
    def image_size(self):
        return (self.image_w, self.image_h)

    @property
    def noise(self) -> DetectorNoise:
        return DetectorNoise(self.noise_px, self.noise_desc, self.clutter, self.n_keypoints)

    def to_manifest(self) -> dict:
        return asdict(self)

    @classmethod
    def from_manifest(cls, m: dict) -> "GenConfig":
        kw = {}
        for f in fields(cls):
            if f.name in m:
                kw[f.name] = _coerce(m[f.name], f.type)
        return cls(**kw)


def _coerce(value, typ):
    if not isinstance(value, str):
        return value
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", "str")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


@dataclass(eq=False)
class PairSample:
    kps1: KeypointSet
    kps2: KeypointSet
    K1: CameraIntrinsics
    K2: CameraIntrinsics
    gt: Pose
    scenario: str = "c2w"
    prompt: ObjectPrompt | None = None
    model_points: np.ndarray | None = None
    image_size: tuple = (640, 480)

    def __post_init__(self):
        if self.prompt is not None and self.scenario != "o2c":
            raise ValueError("prompts are only defined for object-to-camera pairs")


@dataclass
class Dataset:
    samples: list
    manifest: dict
    split: str = "train"

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


def _intrinsics(rng, cfg: GenConfig) -> CameraIntrinsics:
    fx = rng.uniform(cfg.fx_min, cfg.fx_max) if cfg.fx_max > cfg.fx_min else cfg.fx_min
    return CameraIntrinsics(fx, fx, cfg.image_w / 2.0, cfg.image_h / 2.0)


def _ball(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    return np.asarray(center) + v * r


def _rotation(rng, cfg: GenConfig):
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(cfg.min_rot_deg, cfg.max_rot_deg))
    return axis_angle_to_rotation(axis, angle)


def _room(rng, n, near, far, cone_deg):
    """Points at distances [near, far] inside a cone of half-angle ``cone_deg`` about +z."""
    cz = rng.uniform(np.cos(np.radians(cone_deg)), 1.0, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    sz = np.sqrt(1.0 - cz ** 2)
    dirs = np.stack([sz * np.cos(phi), sz * np.sin(phi), cz], axis=1)
    return dirs * rng.uniform(near, far, n)[:, None]


def camera_to_world_geometry(rng, cfg: GenConfig):
    """Scene in the first camera frame, both intrinsics and the relative pose."""
    K1, K2 = _intrinsics(rng, cfg), _intrinsics(rng, cfg)
    n = cfg.scene_points
    scene = SyntheticScene(_room(rng, n, cfg.scene_near, cfg.scene_far, cfg.scene_cone_deg),
                           np.arange(n), random_descriptors(rng, n, cfg.d))
    R = _rotation(rng, cfg)
    # the second camera orbits a fixated point on the first optical axis, so the
    # baseline direction is tied to the rotation as in hand-held capture
    p = np.array([0.0, 0.0, rng.uniform(cfg.fixation_min, cfg.fixation_max)])
    u = p - R.T @ p + rng.normal(scale=cfg.baseline_jitter, size=3)
    nu = np.linalg.norm(u)
    u = u / nu if nu > 1e-9 else np.array([1.0, 0.0, 0.0])
    c2 = u * rng.uniform(cfg.baseline_min, cfg.baseline_max)
    return scene, K1, K2, Pose(R, -R @ c2)


def _camera_to_world(rng, cfg: GenConfig) -> PairSample:
    scene, K1, K2, gt = camera_to_world_geometry(rng, cfg)
    kps1 = synthetic_detect(scene, Pose.identity(), K1, cfg.image_size, cfg.noise, rng, shuffle=True)
    kps2 = synthetic_detect(scene, gt, K2, cfg.image_size, cfg.noise, rng, shuffle=True)
    shared = np.intersect1d(kps1.ids[kps1.ids >= 0], kps2.ids[kps2.ids >= 0])
    if len(shared) < min(cfg.min_shared, cfg.n_keypoints // 2):
        raise EmptyView(f"only {len(shared)} covisible points")
    return PairSample(pad_to(kps1, cfg.n_keypoints), pad_to(kps2, cfg.n_keypoints), K1, K2, gt,
                      "c2w", image_size=cfg.image_size)


def _object_to_camera(rng, cfg: GenConfig) -> PairSample:
    K = _intrinsics(rng, cfg)
    n_obj = max(cfg.scene_points // 2, 8)
    n_bg = max(cfg.scene_points - n_obj, 1)
    depth = rng.uniform(0.7, 1.0) * cfg.scene_depth
    half_w = depth * cfg.image_w / (2 * K.fx)
    half_h = depth * cfg.image_h / (2 * K.fy)
    c = np.array([rng.uniform(-0.4, 0.4) * half_w, rng.uniform(-0.4, 0.4) * half_h, depth])
    radius = 0.25 * cfg.scene_radius
    obj = _ball(rng, n_obj, c, radius)
    bg_depth = cfg.scene_depth * 1.6
    bg = np.stack([rng.uniform(-1, 1, n_bg) * bg_depth * cfg.image_w / (2 * K.fx),
                   rng.uniform(-1, 1, n_bg) * bg_depth * cfg.image_h / (2 * K.fy),
                   bg_depth + rng.uniform(-0.5, 0.5, n_bg)], axis=1)
    ids = np.arange(n_obj + n_bg)
    desc = random_descriptors(rng, n_obj + n_bg, cfg.d)
    R = _rotation(rng, cfg)
    delta = rng.uniform(-0.1, 0.1, size=3) * cfg.scene_radius
    gt = Pose(R, c + delta - R @ c)
    scene1 = SyntheticScene(np.vstack([obj, bg]), ids, desc, {"object": ids[:n_obj], "background": ids[n_obj:]})
    scene2 = SyntheticScene(np.vstack([gt.apply(obj), bg]), ids, desc, scene1.object_subsets)
    ident = Pose.identity()
    kps1 = synthetic_detect(scene1, ident, K, cfg.image_size, cfg.noise, rng, shuffle=True)
    kps2 = synthetic_detect(scene2, ident, K, cfg.image_size, cfg.noise, rng, shuffle=True)
    on_obj = np.isin(kps1.ids, ids[:n_obj])
    if on_obj.sum() < 4:
        raise EmptyView("object barely visible in the reference view")
    oc = kps1.coords[on_obj]
    lo, hi = oc.min(axis=0), oc.max(axis=0)
    hi = np.where(hi - lo < 1.0, lo + 1.0, hi)
    prompt = ObjectPrompt(tuple(lo), tuple(hi))
    return PairSample(pad_to(kps1, cfg.n_keypoints), pad_to(kps2, cfg.n_keypoints), K, K, gt,
                      "o2c", prompt=prompt, model_points=obj, image_size=cfg.image_size)


def generate_pair(cfg: GenConfig, split: str, index: int, max_attempts: int = 100) -> PairSample:
    rng = np.random.default_rng([cfg.seed, _SPLIT_CODE[split], index])
    make = _camera_to_world if cfg.scenario == "c2w" else _object_to_camera
    for _ in range(max_attempts):
        try:
            sample = make(rng, cfg)
        except EmptyView:
            continue
        need = min(8, cfg.n_keypoints)
        if sample.kps1.num_valid >= need and sample.kps2.num_valid >= need and np.linalg.norm(sample.gt.t) > 1e-3:
            return sample
    raise ConfigError(f"could not generate a visible pair after {max_attempts} attempts "
                      f"(split={split}, index={index})")


def generate_dataset(cfg: GenConfig, split: str = "train", threads: int = 1) -> Dataset:
    """Deterministic in ``(cfg, split)``; every sample has its own seed stream."""
    if split not in _SPLIT_CODE:
        raise ConfigError(f"unknown split {split!r}")
    count = {"train": cfg.pairs, "val": cfg.val_pairs, "test": cfg.test_pairs}[split]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            samples = list(ex.map(lambda i: generate_pair(cfg, split, i), range(count)))
    else:
        samples = [generate_pair(cfg, split, i) for i in range(count)]
    return Dataset(samples, cfg.to_manifest(), split)


# -- disk format --------------------------------------------------------------

def _f(x) -> str:
    return repr(float(x))


def _write_record(path: Path, stem: str, s: PairSample, split: str) -> None:
    save_keypoint_file(path / f"{stem}_1.kpts", s.kps1)
    save_keypoint_file(path / f"{stem}_2.kpts", s.kps2)
    lines = [
        f"split {split}",
        f"scenario {s.scenario}",
        f"image {int(s.image_size[0])} {int(s.image_size[1])}",
        "K1 " + " ".join(_f(v) for v in s.K1.as_array()),
        "K2 " + " ".join(_f(v) for v in s.K2.as_array()),
        "R " + " ".join(_f(v) for v in s.gt.R.reshape(-1)) + " t " + " ".join(_f(v) for v in s.gt.t),
        f"kps1 {stem}_1.kpts",
        f"kps2 {stem}_2.kpts",
        "ids1 " + " ".join(str(int(i)) for i in s.kps1.ids[s.kps1.valid_mask]),
        "ids2 " + " ".join(str(int(i)) for i in s.kps2.ids[s.kps2.valid_mask]),
    ]
    if s.prompt is not None:
        lines.append("prompt " + " ".join(_f(v) for v in s.prompt.as_tuple()))
    if s.model_points is not None:
        lines.append("model " + " ".join(_f(v) for v in np.asarray(s.model_points).reshape(-1)))
    (path / f"{stem}.pair").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_manifest(path, manifest: dict) -> None:
    body = "".join(f"{k}={manifest[k]}\n" for k in manifest)
    Path(path).write_text(body, encoding="utf-8", newline="\n")


def read_manifest(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"{path}: expected key=value", line=n)
        out[key.strip()] = value.strip()
    return out


def save_dataset(root, datasets) -> None:
    """Write one or more splits sharing a manifest into ``root``."""
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    manifest = {"format": DATASET_VERSION}
    for ds in datasets:
        manifest.update(ds.manifest)
    for ds in datasets:
        manifest[f"count_{ds.split}"] = len(ds)
        for i, s in enumerate(ds.samples):
            _write_record(root / "samples", f"{ds.split}_{i:06d}", s, ds.split)
    write_manifest(root / "manifest", manifest)


def _parse_record(path: Path, d: int | None) -> PairSample:
    rec = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        key, _, rest = line.partition(" ")
        rec[key] = rest.split()
    try:
        K1 = CameraIntrinsics(*map(float, rec["K1"]))
        K2 = CameraIntrinsics(*map(float, rec["K2"]))
        vals = rec["R"]
        R = np.array(list(map(float, vals[:9]))).reshape(3, 3)
        t = np.array(list(map(float, vals[10:13])))
        kps1 = load_keypoint_file(path.parent / rec["kps1"][0], d)
        kps2 = load_keypoint_file(path.parent / rec["kps2"][0], d)
    except (KeyError, ValueError, IndexError) as e:
        raise ParseError(f"{path}: malformed pair record ({e})") from None
    if "ids1" in rec and len(rec["ids1"]) == len(kps1):
        kps1.ids = np.array(list(map(int, rec["ids1"])), dtype=np.int64)
    if "ids2" in rec and len(rec["ids2"]) == len(kps2):
        kps2.ids = np.array(list(map(int, rec["ids2"])), dtype=np.int64)
    prompt = None
    if "prompt" in rec:
        p = list(map(float, rec["prompt"]))
        prompt = ObjectPrompt(tuple(p[:2]), tuple(p[2:4]))
    model = np.array(list(map(float, rec["model"]))).reshape(-1, 3) if "model" in rec else None
    image = tuple(int(v) for v in rec.get("image", ["640", "480"]))
    return PairSample(kps1, kps2, K1, K2, Pose(R, t), rec.get("scenario", ["c2w"])[0],
                      prompt, model, image)


def load_dataset(root, split: str = "train", d: int | None = None) -> Dataset:
    root = Path(root)
    mpath = root / "manifest"
    if not mpath.exists():
        raise ConfigError(f"{root}: no manifest (not a dataset directory?)")
    manifest = read_manifest(mpath)
    if manifest.get("format") != DATASET_VERSION:
        raise ConfigError(f"{root}: unsupported dataset format {manifest.get('format')!r}")
    n = int(manifest.get(f"count_{split}", 0))
    pad = int(manifest["n_keypoints"]) if "n_keypoints" in manifest else None
    samples = []
    for i in range(n):
        s = _parse_record(root / "samples" / f"{split}_{i:06d}.pair", d)
        if pad is not None:
            s.kps1, s.kps2 = pad_to(s.kps1, max(pad, len(s.kps1))), pad_to(s.kps2, max(pad, len(s.kps2)))
        samples.append(s)
    return Dataset(samples, manifest, split)
