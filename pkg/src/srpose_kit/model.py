"""Sparse-keypoint relative pose regressor.

Pipeline per pair: prompt masking and padding, intrinsic-calibration position
encoder, ``layers`` x (shared self-attention on both images, similarity-guided
bidirectional cross-attention), masked mean pooling, and two 3-layer MLP heads
producing a 6D rotation code and a translation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import AllRowsMasked, ConfigMismatch, ShapeMismatch, ZeroDescriptor
from .geometry import CameraIntrinsics, Pose, calibrate, gram_schmidt_6d
from .keypoints import KeypointSet, apply_prompt, pad_to

CHECKPOINT_VERSION = "SRPOSE-CKPT v1"


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    layers: int = 2
    heads: int = 2
    mlp_hidden: int | None = None
    guidance_enabled: bool = True
    cross_attention_enabled: bool = True
    position_encoding_enabled: bool = True
    intrinsic_calibration_enabled: bool = True
    similarity_normalization: str = "clamp"
    # residual stream carries the position embedding: (x + pe) + MHSA(x + pe)
    pe_residual: bool = True
    # per-token feed-forward (d -> 2d -> d) after every attention module
    token_ffn: bool = True
    # scale of the identity used to initialise the cross-attention key projection
    cross_key_init: float = 6.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("need at least one attention layer")
        if self.similarity_normalization not in ("clamp", "minmax"):
            raise ValueError(f"unknown similarity normalization {self.similarity_normalization!r}")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PRESETS = {
    "toy": ModelConfig(),
    "micro": ModelConfig(d=8, layers=1, heads=1),
    "full": ModelConfig(d=256, layers=6, heads=4),
}

ABLATIONS = {
    "no-guidance": {"guidance_enabled": False},
    "no-cross-attention": {"cross_attention_enabled": False},
    "no-position-encoding": {"position_encoding_enabled": False},
    "no-intrinsic-calibration": {"intrinsic_calibration_enabled": False},
}


def param_shapes(config: ModelConfig) -> dict:
    d, h = config.d, config.hidden
    shapes = {"pe.weight": (2, d), "pe.bias": (d,)}
    for m in range(config.layers):
        shapes[f"layer{m}.self.weight"] = (d, 3 * d)
        shapes[f"layer{m}.self.bias"] = (3 * d,)
        if config.cross_attention_enabled:
            shapes[f"layer{m}.cross.weight"] = (d, 2 * d)
            shapes[f"layer{m}.cross.bias"] = (2 * d,)
        else:
            shapes[f"layer{m}.self2.weight"] = (d, 3 * d)
            shapes[f"layer{m}.self2.bias"] = (3 * d,)
        if config.token_ffn:
            for f in ("ffn1", "ffn2"):
                shapes[f"layer{m}.{f}.0.weight"] = (d, 2 * d)
                shapes[f"layer{m}.{f}.0.bias"] = (2 * d,)
                shapes[f"layer{m}.{f}.1.weight"] = (2 * d, d)
                shapes[f"layer{m}.{f}.1.bias"] = (d,)
    for head, out in (("rot", 6), ("trans", 3)):
        dims = [2 * d, h, h, out]
        for i in range(3):
            shapes[f"{head}.{i}.weight"] = (dims[i], dims[i + 1])
            shapes[f"{head}.{i}.bias"] = (dims[i + 1],)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    """Fan-in scaled uniform weights, zero biases.

    With ``cross_key_init > 0`` the key half of every cross-attention projection
    starts as that multiple of the identity, so the initial cross logits are
    sharp descriptor correlations instead of near-uniform noise.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            w = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            w = rng.uniform(-bound, bound, size=shape)
            if name.endswith(".cross.weight") and config.cross_key_init:
                w[:, :config.d] = config.cross_key_init * np.eye(config.d)
        params[name] = T.parameter(w, name)
    return params


# -- inputs ------------------------------------------------------------------

def similarity_matrix(d1, d2, mask1=None, mask2=None, normalization: str = "clamp") -> np.ndarray:
    """Descriptor cosine similarity mapped to [0, 1]; masked rows/columns are 0."""
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    m1 = np.ones(d1.shape[:-1], bool) if mask1 is None else np.asarray(mask1, bool)
    m2 = np.ones(d2.shape[:-1], bool) if mask2 is None else np.asarray(mask2, bool)
    n1 = np.linalg.norm(d1, axis=-1)
    n2 = np.linalg.norm(d2, axis=-1)
    if np.any(m1 & (n1 == 0)) or np.any(m2 & (n2 == 0)):
        raise ZeroDescriptor("valid keypoint with zero-norm descriptor")
    u1 = d1 / np.where(n1 > 0, n1, 1.0)[..., None]
    u2 = d2 / np.where(n2 > 0, n2, 1.0)[..., None]
    S = (u1 @ np.swapaxes(u2, -1, -2) + 1.0) / 2.0
    valid = m1[..., :, None] & m2[..., None, :]
    if normalization == "minmax":
        lo = np.where(valid, S, np.inf).min(axis=(-2, -1), keepdims=True)
        hi = np.where(valid, S, -np.inf).max(axis=(-2, -1), keepdims=True)
        span = hi - lo
        S = np.where(span > 0, (S - lo) / np.where(span > 0, span, 1.0), 1.0)
    S = np.clip(S, 0.0, 1.0)
    return np.where(valid, S, 0.0)


def keypoint_positions(kps: KeypointSet, K: CameraIntrinsics, config: ModelConfig) -> np.ndarray:
    pos = calibrate(kps.coords, K) if config.intrinsic_calibration_enabled else kps.coords.copy()
    pos[~kps.valid_mask] = 0.0
    return pos


@dataclass
class Batch:
    desc1: np.ndarray  # (B, n, d)
    desc2: np.ndarray
    pos1: np.ndarray  # (B, n, 2)
    pos2: np.ndarray
    mask1: np.ndarray  # (B, n) bool
    mask2: np.ndarray
    S: np.ndarray  # (B, n, n)

    def __len__(self):
        return len(self.desc1)


def make_batch(pairs, config: ModelConfig, n: int | None = None) -> Batch:
    """Stack pairs into padded arrays.  Each pair needs kps1, kps2, K1, K2 and an optional prompt."""
    sets = []
    for p in pairs:
        k1, k2 = p.kps1, p.kps2
        if getattr(p, "prompt", None) is not None:
            k1 = apply_prompt(k1, p.prompt)
        for k in (k1, k2):
            if k.dim != config.d:
                raise ShapeMismatch(f"descriptor width {k.dim} != model d={config.d}")
            if k.num_valid == 0:
                raise AllRowsMasked("keypoint set without valid rows")
        sets.append((k1, k2, p.K1, p.K2))
    width = max(max(len(k1), len(k2)) for k1, k2, _, _ in sets)
    n = width if n is None else max(n, max(max(k1.num_valid, k2.num_valid) for k1, k2, _, _ in sets))
    cols = {k: [] for k in ("desc1", "desc2", "pos1", "pos2", "mask1", "mask2")}
    for k1, k2, K1, K2 in sets:
        k1, k2 = pad_to(k1, n), pad_to(k2, n)
        cols["desc1"].append(k1.descriptors)
        cols["desc2"].append(k2.descriptors)
        cols["pos1"].append(keypoint_positions(k1, K1, config))
        cols["pos2"].append(keypoint_positions(k2, K2, config))
        cols["mask1"].append(k1.valid_mask)
        cols["mask2"].append(k2.valid_mask)
    arr = {k: np.stack(v) for k, v in cols.items()}
    S = similarity_matrix(arr["desc1"], arr["desc2"], arr["mask1"], arr["mask2"],
                          config.similarity_normalization)
    return Batch(S=S, **arr)


# -- network -----------------------------------------------------------------

def linear(x, params, prefix):
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def encode_positions_array(pos, params, config: ModelConfig):
    """Position embeddings (..., n, d) from prepared 2D positions."""
    if not config.position_encoding_enabled:
        return T.Tensor(np.zeros(np.shape(pos)[:-1] + (config.d,)))
    return linear(T.Tensor(pos), params, "pe")


def encode_positions(kps: KeypointSet, K: CameraIntrinsics, params, config: ModelConfig) -> T.Tensor:
    if kps.dim != config.d:
        raise ShapeMismatch(f"descriptor width {kps.dim} != model d={config.d}")
    return encode_positions_array(keypoint_positions(kps, K, config), params, config)


def _split_heads(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def self_attention_block(x, pe, mask, params, prefix, heads, pe_residual=False):
    """``x + MHSA(x + pe)`` with padded keys excluded and padded query rows zeroed.

    ``pe_residual`` adds the attention output to ``x + pe`` instead of ``x``.
    """
    mask = np.asarray(mask, bool)
    if not mask.any(axis=-1).all():
        raise AllRowsMasked("self-attention over a set with no valid rows")
    d = x.shape[-1]
    h = x + pe if pe is not None else x
    qkv = linear(h, params, prefix)
    q = _split_heads(qkv[..., :d], heads)
    k = _split_heads(qkv[..., d:2 * d], heads)
    v = _split_heads(qkv[..., 2 * d:], heads)
    logits = (q @ T.swap_last(k)) * (1.0 / np.sqrt(d // heads))
    att = T.softmax_rows(logits, mask[:, None, None, :])
    out = _merge_heads(att @ v) * mask[:, :, None].astype(float)
    return (h if pe_residual else x) + out


def token_ffn(x, mask, params, prefix):
    """``x + W2 relu(W1 x)`` per token; padded rows stay zero."""
    h = T.relu(linear(x, params, prefix + ".0"))
    return x + linear(h, params, prefix + ".1") * np.asarray(mask, bool)[:, :, None].astype(float)


def guided_cross_attention_block(x1, x2, S, mask1, mask2, params, prefix, heads, guidance=True,
                                 record=None):
    """Bidirectional cross-attention sharing one logit matrix, optionally scaled by ``S``."""
    mask1 = np.asarray(mask1, bool)
    mask2 = np.asarray(mask2, bool)
    if not (mask1.any(axis=-1).all() and mask2.any(axis=-1).all()):
        raise AllRowsMasked("cross-attention over a set with no valid rows")
    d = x1.shape[-1]
    b = x1.shape[0]
    if x1.shape == x2.shape:
        # one projection over both images when the sets are padded alike
        kv = linear(T.concat([x1, x2], axis=0), params, prefix)
        kv1, kv2 = kv[:b], kv[b:]
    else:
        kv1, kv2 = linear(x1, params, prefix), linear(x2, params, prefix)
    k1, v1 = _split_heads(kv1[..., :d], heads), _split_heads(kv1[..., d:], heads)
    k2, v2 = _split_heads(kv2[..., :d], heads), _split_heads(kv2[..., d:], heads)
    logits = (k1 @ T.swap_last(k2)) * (1.0 / np.sqrt(d // heads))
    if guidance:
        logits = logits * np.asarray(S)[:, None, :, :]
    if record is not None:
        record.append(logits.data.copy())
    a12 = T.softmax_rows(logits, mask2[:, None, None, :])
    a21 = T.softmax_rows(T.swap_last(logits), mask1[:, None, None, :])
    out1 = _merge_heads(a12 @ v2) * mask1[:, :, None].astype(float)
    out2 = _merge_heads(a21 @ v1) * mask2[:, :, None].astype(float)
    return x1 + out1, x2 + out2


def _mlp(f, params, head):
    h = T.relu(linear(f, params, f"{head}.0"))
    h = T.relu(linear(h, params, f"{head}.1"))
    return linear(h, params, f"{head}.2")


def forward_batch(batch: Batch, params, config: ModelConfig, similarity=None, diagnostics=None):
    """Returns ``(r6, t)`` tensors of shape (B, 6) and (B, 3).

    ``similarity`` overrides the descriptor similarity matrix; ``diagnostics``
    (a dict) receives the guided cross-attention logits of every layer.
    """
    B = len(batch)
    S = batch.S if similarity is None else np.broadcast_to(np.asarray(similarity, float), batch.S.shape)
    mask = np.concatenate([batch.mask1, batch.mask2], axis=0)
    pe = encode_positions_array(np.concatenate([batch.pos1, batch.pos2], axis=0), params, config)
    x = T.Tensor(np.concatenate([batch.desc1, batch.desc2], axis=0))
    record = [] if diagnostics is not None else None
    for m in range(config.layers):
        x = self_attention_block(x, pe, mask, params, f"layer{m}.self", config.heads, config.pe_residual)
        if config.token_ffn:
            x = token_ffn(x, mask, params, f"layer{m}.ffn1")
        if config.cross_attention_enabled:
            x1, x2 = guided_cross_attention_block(
                x[:B], x[B:], S, batch.mask1, batch.mask2, params, f"layer{m}.cross",
                config.heads, config.guidance_enabled, record)
            x = T.concat([x1, x2], axis=0)
        else:
            x = self_attention_block(x, None, mask, params, f"layer{m}.self2", config.heads)
        if config.token_ffn:
            x = token_ffn(x, mask, params, f"layer{m}.ffn2")
    pooled = T.mean_over_rows(x, mask)  # (2B, 1, d)
    f = T.concat([pooled[:B], pooled[B:]], axis=-1).reshape(B, 2 * config.d)
    r6 = _mlp(f, params, "rot")
    t = _mlp(f, params, "trans")
    if diagnostics is not None:
        diagnostics["cross_logits"] = record
        diagnostics["mask1"] = batch.mask1
        diagnostics["mask2"] = batch.mask2
    return r6, t


def forward(pair, params, config: ModelConfig, n: int | None = None, similarity=None):
    """Single pair -> ``(r6, t, diagnostics)`` as numpy arrays."""
    batch = make_batch([pair], config, n)
    diag = {}
    r6, t = forward_batch(batch, params, config, similarity, diag)
    diag["cross_logits"] = [a[0] for a in diag["cross_logits"]]
    diag["coords1"] = pair.kps1.coords
    diag["coords2"] = pair.kps2.coords
    return r6.data[0].copy(), t.data[0].copy(), diag


def gram_schmidt_tensor(r6) -> T.Tensor:
    """Differentiable 6D -> rotation for a (B, 6) tensor; columns are (b1, b2, b1 x b2)."""
    a = r6[:, 0:3]
    b = r6[:, 3:6]
    b1 = a / T.sqrt((a * a).sum(axis=-1, keepdims=True))
    u = b - (b1 * b).sum(axis=-1, keepdims=True) * b1
    b2 = u / T.sqrt((u * u).sum(axis=-1, keepdims=True))
    b3 = T.cross(b1, b2)
    n = r6.shape[0]
    return T.concat([b1.reshape(n, 3, 1), b2.reshape(n, 3, 1), b3.reshape(n, 3, 1)], axis=-1)


def predict_pose(pair, params, config: ModelConfig) -> Pose:
    r6, t, _ = forward(pair, params, config)
    return Pose(gram_schmidt_6d(r6), t)


def predict_batch(pairs, params, config: ModelConfig, batch_size: int = 64) -> list:
    out = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        r6, t = forward_batch(make_batch(chunk, config), params, config)
        out.extend(Pose(gram_schmidt_6d(r), tt) for r, tt in zip(r6.data, t.data))
    return out


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params, config: ModelConfig, meta: dict | None = None,
                    optimizer_state: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "meta": meta or {},
        "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in params.items()},
    }
    if optimizer_state is not None:
        doc["optimizer"] = {
            "step": int(optimizer_state["step"]),
            "m": {k: v.reshape(-1).tolist() for k, v in optimizer_state["m"].items()},
            "v": {k: v.reshape(-1).tolist() for k, v in optimizer_state["v"].items()},
        }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def _config_diff(a: dict, b: dict) -> list:
    return [f"{k}: checkpoint={a.get(k)!r} expected={b.get(k)!r}"
            for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)]


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Returns ``(params, config, meta, optimizer_state_or_None)``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ConfigMismatch(f"unreadable checkpoint {path}: {e}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_VERSION:
        raise ConfigMismatch(f"{path}: not a {CHECKPOINT_VERSION} checkpoint")
    try:
        config = ModelConfig.from_dict(doc["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigMismatch(f"{path}: bad config block: {e}") from None
    if expected is not None and config != expected:
        raise ConfigMismatch("checkpoint config mismatch:\n  " +
                             "\n  ".join(_config_diff(config.to_dict(), expected.to_dict())))
    shapes = param_shapes(config)
    stored = doc.get("params", {})
    problems = [f"missing {k}" for k in shapes if k not in stored]
    problems += [f"unexpected {k}" for k in stored if k not in shapes]
    params = {}
    for name, shape in shapes.items():
        if name not in stored:
            continue
        rec = stored[name]
        arr = np.asarray(rec.get("data", []), dtype=float)
        if tuple(rec.get("shape", ())) != tuple(shape) or arr.size != int(np.prod(shape)):
            problems.append(f"{name}: shape {rec.get('shape')} != {list(shape)}")
            continue
        if not np.all(np.isfinite(arr)):
            problems.append(f"{name}: non-finite values")
            continue
        params[name] = T.parameter(arr.reshape(shape), name)
    if problems:
        raise ConfigMismatch(f"{path}: checkpoint does not match its config:\n  " + "\n  ".join(problems))
    opt = None
    if "optimizer" in doc:
        o = doc["optimizer"]
        opt = {"step": o["step"],
               "m": {k: np.asarray(v, float).reshape(shapes[k]) for k, v in o["m"].items()},
               "v": {k: np.asarray(v, float).reshape(shapes[k]) for k, v in o["v"].items()}}
    return params, config, doc.get("meta", {}), opt
