"""Keypoint sets, object prompts, the synthetic detector and the KPTS file format."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyView,
    NoKeypointsInPrompt,
    ParseError,
    TooManyKeypoints,
)
from .geometry import CameraIntrinsics, Pose

PAD_COORD = -1.0


@dataclass(eq=False)
class KeypointSet:
    coords: np.ndarray
    descriptors: np.ndarray
    valid_mask: np.ndarray | None = None
    ids: np.ndarray | None = None  # scene point id per row, -1 for clutter/padding

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        if self.descriptors.ndim != 2 or len(self.descriptors) != len(self.coords):
            raise ValueError(f"coords {self.coords.shape} and descriptors {self.descriptors.shape} disagree")
        n = len(self.coords)
        self.valid_mask = (np.ones(n, bool) if self.valid_mask is None
                           else np.asarray(self.valid_mask, dtype=bool).reshape(n))
        self.ids = (np.full(n, -1, dtype=np.int64) if self.ids is None
                    else np.asarray(self.ids, dtype=np.int64).reshape(n))

    def __len__(self):
        return len(self.coords)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def num_valid(self) -> int:
        return int(self.valid_mask.sum())

    def valid(self) -> "KeypointSet":
        """Copy restricted to the valid rows."""
        m = self.valid_mask
        return KeypointSet(self.coords[m], self.descriptors[m], None, self.ids[m])

    def copy(self) -> "KeypointSet":
        return KeypointSet(self.coords.copy(), self.descriptors.copy(),
                           self.valid_mask.copy(), self.ids.copy())


@dataclass(frozen=True)
class ObjectPrompt:
    top_left: tuple
    bottom_right: tuple

    def __post_init__(self):
        tl = tuple(float(v) for v in self.top_left)
        br = tuple(float(v) for v in self.bottom_right)
        if not (tl[0] < br[0] and tl[1] < br[1]):
            raise ValueError(f"invalid prompt box {tl} -> {br}")
        object.__setattr__(self, "top_left", tl)
        object.__setattr__(self, "bottom_right", br)

    def contains(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=float).reshape(-1, 2)
        (x0, y0), (x1, y1) = self.top_left, self.bottom_right
        return (c[:, 0] >= x0) & (c[:, 0] <= x1) & (c[:, 1] >= y0) & (c[:, 1] <= y1)

    def as_tuple(self):
        return self.top_left + self.bottom_right


@dataclass
class SyntheticScene:
    points: np.ndarray  # (N, 3) in the frame the detector pose is applied to
    ids: np.ndarray
    descriptors: np.ndarray  # (N, d) unit-norm base descriptor per point
    object_subsets: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("scene point identifiers must be unique")

    @property
    def descriptor_table(self) -> dict:
        return {int(i): d for i, d in zip(self.ids, self.descriptors)}

    def subset(self, ids) -> "SyntheticScene":
        keep = np.isin(self.ids, np.asarray(list(ids)))
        return SyntheticScene(self.points[keep], self.ids[keep], self.descriptors[keep])


@dataclass(frozen=True)
class DetectorNoise:
    sigma_px: float = 0.0
    sigma_desc: float = 0.0
    clutter: float = 0.0  # fraction of returned keypoints that are clutter
    max_keypoints: int | None = None


def unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def random_descriptors(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return unit_rows(rng.normal(size=(n, d)))


def synthetic_detect(scene: SyntheticScene, pose: Pose, K: CameraIntrinsics, image_size,
                     noise: DetectorNoise = DetectorNoise(), rng: np.random.Generator | None = None,
                     shuffle: bool = False) -> KeypointSet:
    """Project the scene into a view and emit noisy keypoints with descriptors.

    Visible means positive depth and inside ``[0, w] x [0, h]``.  Clutter rows
    get uniform positions and random descriptors and carry id -1.
    """
    w, h = image_size
    if w <= 0 or h <= 0:
        raise ValueError(f"image size must be positive, got {image_size}")
    rng = rng if rng is not None else np.random.default_rng(0)
    X = pose.apply(scene.points)
    z = X[:, 2]
    front = z > 0
    uv = np.full((len(X), 2), np.nan)
    uv[front, 0] = K.fx * X[front, 0] / z[front] + K.cx
    uv[front, 1] = K.fy * X[front, 1] / z[front] + K.cy
    vis = front & (uv[:, 0] >= 0) & (uv[:, 0] <= w) & (uv[:, 1] >= 0) & (uv[:, 1] <= h)
    idx = np.flatnonzero(vis)
    if idx.size == 0:
        raise EmptyView("no scene point is visible")

    n_clutter = 0
    if noise.max_keypoints is not None:
        n_clutter = int(round(noise.clutter * noise.max_keypoints))
        n_real = noise.max_keypoints - n_clutter
        if idx.size > n_real:
            idx = np.sort(rng.choice(idx, size=n_real, replace=False))
    elif noise.clutter > 0:
        n_clutter = int(round(noise.clutter / (1.0 - noise.clutter) * idx.size))

    coords = uv[idx]
    if noise.sigma_px > 0:
        coords = coords + rng.normal(scale=noise.sigma_px, size=coords.shape)
        coords = np.clip(coords, [0.0, 0.0], [w, h])
    desc = scene.descriptors[idx]
    if noise.sigma_desc > 0:
        desc = unit_rows(desc + rng.normal(scale=noise.sigma_desc, size=desc.shape))
    ids = scene.ids[idx]

    if n_clutter:
        cc = rng.uniform([0.0, 0.0], [w, h], size=(n_clutter, 2))
        cd = random_descriptors(rng, n_clutter, desc.shape[1])
        coords = np.vstack([coords, cc])
        desc = np.vstack([desc, cd])
        ids = np.concatenate([ids, np.full(n_clutter, -1)])
    if shuffle:
        perm = rng.permutation(len(coords))
        coords, desc, ids = coords[perm], desc[perm], ids[perm]
    return KeypointSet(coords, desc, None, ids)


def apply_prompt(kps: KeypointSet, prompt: ObjectPrompt) -> KeypointSet:
    """Mask out rows outside the (closed) prompt box; coordinates and descriptors are untouched."""
    mask = kps.valid_mask & prompt.contains(kps.coords)
    if not mask.any():
        raise NoKeypointsInPrompt(f"no keypoint inside prompt {prompt.as_tuple()}")
    return replace(kps, valid_mask=mask)


def pad_to(kps: KeypointSet, n: int) -> KeypointSet:
    if n < len(kps):
        if n < kps.num_valid:
            raise TooManyKeypoints(f"{kps.num_valid} valid keypoints do not fit in {n} rows")
        kps = kps.valid()
    extra = n - len(kps)
    if extra == 0:
        return kps
    return KeypointSet(
        np.vstack([kps.coords, np.full((extra, 2), PAD_COORD)]),
        np.vstack([kps.descriptors, np.zeros((extra, kps.dim))]),
        np.concatenate([kps.valid_mask, np.zeros(extra, bool)]),
        np.concatenate([kps.ids, np.full(extra, -1)]),
    )


# -- KPTS v1 -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def dump_keypoints(kps: KeypointSet, meta: dict | None = None) -> str:
    v = kps.valid()
    head = f"KPTS v1 n={len(v)} d={v.dim}"
    for key in ("orig_w", "orig_h", "det_w", "det_h"):
        if meta and key in meta:
            head += f" {key}={meta[key]}"
    lines = [head]
    for (u, vv), d in zip(v.coords, v.descriptors):
        lines.append(" ".join([_fmt(u), _fmt(vv)] + [_fmt(x) for x in d]))
    return "\n".join(lines) + "\n"


def save_keypoint_file(path, kps: KeypointSet, meta: dict | None = None) -> None:
    Path(path).write_text(dump_keypoints(kps, meta), encoding="utf-8", newline="\n")


def parse_keypoints(text: str, d: int | None = None) -> KeypointSet:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise ParseError("empty keypoint file", line=1)
    head = lines[0].split()
    if len(head) < 4 or head[0] != "KPTS" or head[1] != "v1":
        raise ParseError("expected header 'KPTS v1 n=<N> d=<D>'", line=1)
    fields = {}
    for tok in head[2:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise ParseError(f"malformed header token {tok!r}", line=1, field=tok)
        try:
            fields[key] = int(val)
        except ValueError:
            try:
                fields[key] = float(val)
            except ValueError:
                raise ParseError(f"non-numeric header value {tok!r}", line=1, field=key) from None
    for key in ("n", "d"):
        if key not in fields:
            raise ParseError(f"header missing {key}=", line=1, field=key)
    n, width = int(fields["n"]), int(fields["d"])
    if d is not None and width != d:
        raise DimensionMismatch(f"descriptor width {width} != configured {d}", line=1, field="d")
    body = lines[1:]
    if len(body) != n:
        raise ParseError(f"header says n={n} but found {len(body)} rows", line=len(lines))
    coords = np.empty((n, 2))
    desc = np.empty((n, width))
    for i, line in enumerate(body):
        toks = line.split()
        if len(toks) != 2 + width:
            raise DimensionMismatch(f"row has {len(toks) - 2} descriptor values, expected {width}",
                                    line=i + 2)
        try:
            vals = [float(t) for t in toks]
        except ValueError as e:
            raise ParseError(f"bad number: {e}", line=i + 2) from None
        coords[i] = vals[:2]
        desc[i] = vals[2:]
    if n == 0:
        raise ParseError("keypoint file holds no rows", line=1)
    if all(k in fields for k in ("orig_w", "orig_h", "det_w", "det_h")):
        coords = coords * np.array([fields["orig_w"] / fields["det_w"], fields["orig_h"] / fields["det_h"]])
    norms = np.linalg.norm(desc, axis=1)
    if np.any(norms == 0):
        raise ParseError("zero descriptor", line=int(np.flatnonzero(norms == 0)[0]) + 2)
    return KeypointSet(coords, desc / norms[:, None])


def load_keypoint_file(path, d: int | None = None) -> KeypointSet:
    return parse_keypoints(Path(path).read_text(encoding="utf-8"), d)
