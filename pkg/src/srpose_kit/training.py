"""Pose losses, AdamW with a one-cycle schedule, and the supervised training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DivergenceDetected
from .geometry import rotation_to_6d
from .model import Batch, ModelConfig, forward_batch, gram_schmidt_tensor, init_params, make_batch


@dataclass(frozen=True)
class LossWeights:
    t: float = 1.0
    tn: float = 1.0
    ta: float = 1.0
    huber_delta: float = 1.0

    def __post_init__(self):
        for name in ("t", "tn", "ta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and nonnegative, got {v}")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: str = "onecycle"
    warmup_frac: float = 0.3
    final_div: float = 25.0

    def __post_init__(self):
        if self.max_lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("max_lr, epochs and batch_size must be positive")
        if self.schedule not in ("onecycle", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


TRAIN_PRESETS = {
    "toy": TrainConfig(),
    "smoke": TrainConfig(epochs=5),
    "full": TrainConfig(max_lr=1e-4, epochs=500, batch_size=32),
}


# -- losses ------------------------------------------------------------------

def _batched(x, tail_ndim):
    x = T.as_tensor(x)
    single = x.ndim == tail_ndim
    return (x.reshape((1,) + x.shape) if single else x), single


def _finish(x, single):
    return x.reshape(()) if single else x


def loss_rotation(R, Rgt, w: LossWeights = LossWeights()):
    """Huber of the geodesic angle (radians).  Accepts (3, 3) or (B, 3, 3)."""
    R, single = _batched(R, 2)
    Rgt = np.asarray(Rgt, dtype=float).reshape(R.shape)
    cos = ((R * Rgt).sum(axis=(-2, -1)) - 1.0) * 0.5
    return _finish(T.huber(T.arccos(cos), w.huber_delta), single)


def loss_translation(t, tgt, w: LossWeights = LossWeights()):
    """``(L_t, L_tn, L_ta, degenerate)``; direction terms are 0 where a norm is < 1e-12."""
    t, single = _batched(t, 1)
    tgt = np.asarray(tgt, dtype=float).reshape(t.shape)
    delta = w.huber_delta
    l_t = T.huber(t - tgt, delta).sum(axis=-1)
    norm = np.linalg.norm(t.data, axis=-1)
    gnorm = np.linalg.norm(tgt, axis=-1)
    degenerate = (norm < 1e-12) | (gnorm < 1e-12)
    keep = (~degenerate).astype(float)
    # degenerate rows are swapped for a harmless unit vector and zeroed afterwards
    e1 = np.zeros_like(tgt)
    e1[:, 0] = 1.0
    safe_t = t * keep[:, None] + e1 * degenerate[:, None]
    safe_g = np.where(degenerate[:, None], e1, tgt)
    tn = safe_t / T.sqrt((safe_t * safe_t).sum(axis=-1, keepdims=True))
    gn = safe_g / np.linalg.norm(safe_g, axis=-1, keepdims=True)
    l_tn = T.huber(tn - gn, delta).sum(axis=-1) * keep
    cos = (tn * gn).sum(axis=-1)
    l_ta = T.huber(T.arccos(cos), delta) * keep
    deg = bool(degenerate[0]) if single else degenerate
    return _finish(l_t, single), _finish(l_tn, single), _finish(l_ta, single), deg


def loss_total(pred, gt_R, gt_t, w: LossWeights = LossWeights()):
    """Weighted pose loss from ``pred = (r6, t)``; differentiable through Gram-Schmidt."""
    r6, t = pred
    r6, single = _batched(r6, 1)
    t = T.as_tensor(t)
    if single:
        t = t.reshape(1, 3)
    R = gram_schmidt_tensor(r6)
    l_r = loss_rotation(R, np.asarray(gt_R, float).reshape(R.shape), w)
    l_t, l_tn, l_ta, _ = loss_translation(t, np.asarray(gt_t, float).reshape(t.shape), w)
    total = l_r + l_t * w.t + l_tn * w.tn + l_ta * w.ta
    return _finish(total, single)


# -- optimisation ------------------------------------------------------------

def one_cycle_lr(step: int, total: int, max_lr: float, warmup_frac: float = 0.3,
                 final_div: float = 25.0) -> float:
    """Linear warm-up from max_lr/final_div to max_lr, then cosine back to max_lr/final_div."""
    low = max_lr / final_div
    warm = max(int(round(warmup_frac * total)), 1)
    if step <= warm:
        return low + (max_lr - low) * step / warm
    frac = min((step - warm) / max(total - warm, 1), 1.0)
    return low + (max_lr - low) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict):
        self.step_count = int(state["step"])
        self.m = {k: np.array(v, float) for k, v in state["m"].items()}
        self.v = {k: np.array(v, float) for k, v in state["v"].items()}


# -- training loop -----------------------------------------------------------

@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "mean_loss", "val_rot_med_deg", "val_trans_med", "lr")

    def append(self, **row):
        self.rows.append({k: row[k] for k in self.COLUMNS})

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(self.COLUMNS)
            for r in self.rows:
                wr.writerow([r["epoch"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                log.append(epoch=int(r["epoch"]), **{c: float(r[c]) for c in cls.COLUMNS[1:]})
        return log


def _take(batch: Batch, idx) -> Batch:
    return Batch(batch.desc1[idx], batch.desc2[idx], batch.pos1[idx], batch.pos2[idx],
                 batch.mask1[idx], batch.mask2[idx], batch.S[idx])


def _targets(samples):
    R = np.stack([s.gt.R for s in samples])
    t = np.stack([s.gt.t for s in samples])
    return R, t


def batch_rotation_errors(R_pred: np.ndarray, R_gt: np.ndarray) -> np.ndarray:
    c = (np.einsum("bij,bij->b", R_pred, R_gt) - 1.0) / 2.0
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def batch_translation_angles(t_pred: np.ndarray, t_gt: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(t_pred, axis=1) * np.linalg.norm(t_gt, axis=1)
    c = np.einsum("bi,bi->b", t_pred, t_gt) / np.where(n > 0, n, 1.0)
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def evaluate_batch(batch: Batch, R_gt, t_gt, params, config: ModelConfig, chunk: int = 128):
    """Rotation errors (deg) and translation angle errors (deg) for a prepared batch."""
    rots, trans = [], []
    for i in range(0, len(batch), chunk):
        sl = slice(i, i + chunk)
        r6, t = forward_batch(_take(batch, sl), params, config)
        R = gram_schmidt_tensor(r6).data
        rots.append(batch_rotation_errors(R, R_gt[sl]))
        trans.append(batch_translation_angles(t.data, t_gt[sl]))
    return np.concatenate(rots), np.concatenate(trans)


def _snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def train(dataset, config: TrainConfig, loss_weights: LossWeights, model_config: ModelConfig,
          val=None, params=None, optimizer_state=None, epoch_callback=None, progress=None):
    """Supervised training.  Returns ``(params, TrainingLog)``.

    ``optimizer_state`` (from a checkpoint) resumes at its saved step; the
    shuffle order depends only on (seed, epoch), so a resumed run follows the
    uninterrupted one.  ``epoch_callback(epoch, params, optimizer, log)`` runs
    after every epoch.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("empty training set")
    if params is None:
        params = init_params(model_config, config.seed)
    full = make_batch(samples, model_config)
    R_gt, t_gt = _targets(samples)
    if val is not None and len(val):
        val_batch = make_batch(list(val), model_config)
        val_R, val_t = _targets(list(val))
    else:
        val_batch = None
    opt = AdamW(params, config.beta1, config.beta2, config.eps, config.weight_decay)
    if optimizer_state is not None:
        opt.load_state(optimizer_state)
    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    start_epoch = opt.step_count // steps_per_epoch
    log = TrainingLog()
    last_good = _snapshot(params)
    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses = []
        lr = config.max_lr
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            step = opt.step_count
            lr = (one_cycle_lr(step, total, config.max_lr, config.warmup_frac, config.final_div)
                  if config.schedule == "onecycle" else config.max_lr)
            opt.zero_grad()
            with T.Tape() as tape:
                pred = forward_batch(_take(full, idx), params, model_config)
                loss = T.tsum(loss_total(pred, R_gt[idx], t_gt[idx], loss_weights)) * (1.0 / len(idx))
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch} step {step}",
                                         last_good=last_good, step=step)
            tape.backward(loss)
            opt.step(lr)
            losses.append(value)
            if progress is not None:
                progress(epoch, b, value)
        if val_batch is not None:
            rot, tra = evaluate_batch(val_batch, val_R, val_t, params, model_config)
            vr, vt = float(np.median(rot)), float(np.median(tra))
        else:
            vr = vt = float("nan")
        log.append(epoch=epoch, mean_loss=float(np.mean(losses)), val_rot_med_deg=vr,
                   val_trans_med=vt, lr=lr)
        last_good = _snapshot(params)
        if epoch_callback is not None:
            epoch_callback(epoch, params, opt, log)
    return params, log


def gt_six_d(samples) -> np.ndarray:
    return np.stack([rotation_to_6d(s.gt.R) for s in samples])


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
