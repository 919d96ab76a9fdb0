"""Joint training of the four streams: MAE loss, SGD with momentum and step
decay, per-clip augmentation, k-fold cross validation."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ATTRIBUTES
from .layers import BatchNorm, Dropout
from .model import QaNetModel, build_model, save_checkpoint
from .tensor import SeededRng


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimizerState:
    learning_rate: float = 0.002
    momentum: float = 0.95
    decay_factor: float = 0.1
    decay_interval: int = 24
    velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be finite and non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.decay_interval < 1:
            raise ValueError("decay_interval must be a positive number of epochs")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_interval)


@dataclass(frozen=True)
class AugmentationSpec:
    max_translation_fraction: float = 0.05
    max_rotation_degrees: float = 5.0
    translate: bool = True
    rotate: bool = True

    def __post_init__(self):
        if self.max_translation_fraction < 0 or self.max_rotation_degrees < 0:
            raise ValueError("augmentation ranges must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 40
    folds: int = 5
    seed: int = 0
    learning_rate: float = 0.002
    momentum: float = 0.95
    decay_factor: float = 0.1
    decay_interval: int = 24
    augment: bool = True
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    checkpoint_every: int = 0      # epochs; 0 = final checkpoint only
    recalibrate_bn: bool = True    # re-estimate batch-norm statistics after the last epoch

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization)")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.learning_rate, self.momentum, self.decay_factor, self.decay_interval)

    def to_dict(self):
        return asdict(self)


def mae_loss(predicted, target) -> float:
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {t.shape}")
    if p.size == 0:
        raise ValueError("empty batch")
    return float(np.abs(p - t).mean())


def mae_grad(predicted, target, dtype=np.float32):
    """Subgradient of ``mae_loss`` with respect to the predictions."""
    p = np.asarray(predicted, dtype=np.float64)
    return (np.sign(p - np.asarray(target, dtype=np.float64)) / p.size).astype(dtype)


# augmentation

def _bilinear(img, ys, xs):
    """Sample img [..., H, W] at float coordinates with zero fill outside."""
    h, w = img.shape[-2:]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0).astype(img.dtype)
    fx = (xs - x0).astype(img.dtype)
    out = np.zeros(img.shape[:-2] + ys.shape, dtype=img.dtype)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            wgt = np.where(ok, wy * wx, 0).astype(img.dtype)
            out += img[..., np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)] * wgt
    return out


def augment_params(spec: AugmentationSpec, height: int, width: int, rng: SeededRng):
    """(shift_y, shift_x) in whole pixels and rotation angle in radians."""
    f = spec.max_translation_fraction if spec.translate else 0.0
    deg = spec.max_rotation_degrees if spec.rotate else 0.0
    u = rng.uniform(-1.0, 1.0, size=3)
    sy = int(np.floor(u[0] * f * height + 0.5))
    sx = int(np.floor(u[1] * f * width + 0.5))
    return sy, sx, math.radians(u[2] * deg)


def apply_transform(clip, shift_y: int, shift_x: int, angle: float):
    """Rotate about the image centre, then translate; applied to every frame."""
    clip = np.asarray(clip)
    h, w = clip.shape[-2:]
    if shift_y == 0 and shift_x == 0 and angle == 0.0:
        return clip.copy()
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: undo the shift, then rotate back by -angle
    dy, dx = yy - shift_y - cy, xx - shift_x - cx
    c, s = math.cos(angle), math.sin(angle)
    src_x = c * dx + s * dy + cx
    src_y = -s * dx + c * dy + cy
    if angle == 0.0:
        src_x, src_y = np.rint(src_x), np.rint(src_y)
    return _bilinear(clip, src_y, src_x)


def augment(clip, spec: AugmentationSpec, rng: SeededRng):
    """One random translation and rotation shared by all frames of the clip."""
    clip = np.asarray(clip)
    return apply_transform(clip, *augment_params(spec, clip.shape[-2], clip.shape[-1], rng))


# optimizer

def _pairs(model, gradients):
    params = dict(model.named_parameters()) if hasattr(model, "named_parameters") else dict(model)
    grads = dict(gradients)
    if params.keys() != grads.keys():
        missing = sorted(set(params) ^ set(grads))
        raise ValueError(f"gradients do not match parameters: {missing[:5]}")
    for name, p in params.items():
        g = grads[name]
        if g is None:
            raise ValueError(f"no gradient for {name}")
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape} for {name}")
        yield name, p, g


def sgd_step(model, gradients, state: OptimizerState, epoch: int) -> None:
    """v <- momentum * v - lr(epoch) * g;  p <- p + v  (in place)."""
    lr = state.lr_at(epoch)
    for name, p, g in _pairs(model, gradients):
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        step = np.multiply(g, lr, dtype=p.dtype)
        if state.momentum == 0.0:
            np.negative(step, out=v)
        else:
            v *= p.dtype.type(state.momentum)
            v -= step
        p += v


# training loop

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    seconds: float
    attribute_loss: tuple


def batch_schedule(n: int, batch_size: int, rng: SeededRng):
    """Shuffled index batches; a trailing batch of one joins the previous one."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _param_stats(model):
    out = {}
    for name, p in model.named_parameters():
        finite = np.isfinite(p)
        out[name] = {"nonfinite": int(p.size - finite.sum()),
                     "absmax": float(np.abs(p[finite]).max()) if finite.any() else None}
    return out


def train(model: QaNetModel, clips, targets, config: TrainConfig = TrainConfig(), *,
          log_path=None, checkpoint_dir=None, epoch_callback=None, state: OptimizerState | None = None):
    """Train in place.  clips [N, T, C, H, W] float in [0, 1], targets [N, 4].

    Returns the list of EpochRecord (mean training MAE per epoch, sample
    weighted).  Each batch: augment, forward all streams, MAE, backward
    through every stream, one SGD step.
    """
    clips = np.asarray(clips)
    targets = np.asarray(targets, dtype=np.float64)
    if clips.ndim != 5 or clips.shape[1:] != model.spec.clip_shape:
        raise ValueError(f"clips {clips.shape} do not match the model input spec {model.spec.clip_shape}")
    if len(clips) != len(targets) or targets.shape[1:] != (len(ATTRIBUTES),):
        raise ValueError("need one target row of 4 scores per clip")
    if len(clips) < 2:
        raise ValueError("need at least 2 clips to train (batch normalization)")
    state = state or config.optimizer()
    root = SeededRng(config.seed)
    log = open(log_path, "w", encoding="utf-8", newline="\n") if log_path else None
    history = []
    try:
        for epoch in range(config.epochs):
            erng = root.child(epoch)
            lr = state.lr_at(epoch)
            t0 = time.perf_counter()
            total, count = 0.0, 0
            per_attr = np.zeros(len(ATTRIBUTES))
            for b, idx in enumerate(batch_schedule(len(clips), config.batch_size, erng.child(0))):
                brng = erng.child(1).child(b)
                x = clips[idx]
                if config.augment:
                    x = np.stack([augment(c, config.augmentation, brng.child(0).child(k))
                                  for k, c in enumerate(x)])
                y = targets[idx]
                pred = model.forward(x, train=True, rng=brng.child(1))
                loss = mae_loss(pred, y)
                if not math.isfinite(loss):
                    raise TrainingDiverged(json.dumps({
                        "epoch": epoch, "batch": b, "clips": [int(i) for i in idx],
                        "parameters": _param_stats(model)}))
                model.backward(mae_grad(pred, y, model.dtype))
                sgd_step(model, model.named_gradients(), state, epoch)
                total += loss * len(idx)
                count += len(idx)
                per_attr += np.abs(pred - y).sum(axis=0)
                if log:
                    log.write(json.dumps({"epoch": epoch, "batch": b, "loss": round(loss, 6), "lr": lr,
                                          "wall_time": round(time.perf_counter() - t0, 3)}) + "\n")
            rec = EpochRecord(epoch, total / count, lr, time.perf_counter() - t0,
                              tuple(float(v) for v in per_attr / count))
            history.append(rec)
            if log:
                log.write(json.dumps({"epoch": epoch, "batch": None, "loss": round(rec.loss, 6),
                                      "lr": lr, "wall_time": round(rec.seconds, 3)}) + "\n")
                log.flush()
            if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, Path(checkpoint_dir) / f"epoch{epoch + 1:03d}.ckpt")
            if epoch_callback:
                epoch_callback(rec)
        if config.recalibrate_bn and config.epochs > 0:
            recalibrate_batchnorm(model, clips, config.batch_size)
    finally:
        if log:
            log.close()
    return history


def recalibrate_batchnorm(model: QaNetModel, clips, batch_size: int = 32) -> None:
    """Replace every batch norm's running statistics by their average over
    ``clips`` with dropout switched off.

    During training each norm sees activations thinned by the dropout before
    it, so the running variance overstates what inference produces.
    """
    clips = np.asarray(clips)
    if len(clips) < 2:
        raise ValueError("need at least 2 clips to estimate batch statistics")
    layers = [l for s in model.streams for l in s.layers()]
    norms = [l for l in layers if isinstance(l, BatchNorm)]
    drops = [(l, l.p) for l in layers if isinstance(l, Dropout)]
    momenta = [n.momentum for n in norms]
    chunks = np.array_split(np.arange(len(clips)), max(1, len(clips) // batch_size))
    try:
        for l, _ in drops:
            l.p = 0.0
        for k, idx in enumerate(chunks):
            for n in norms:
                # cumulative mean: batch k gets weight 1/(k+1); the first replaces the old value
                n.momentum = 1.0 / (k + 1)
            model.forward(clips[idx], train=True, rng=SeededRng(0))
    finally:
        for l, p in drops:
            l.p = p
        for n, m in zip(norms, momenta):
            n.momentum = m


def predict(model: QaNetModel, clips, batch_size: int = 64):
    clips = np.asarray(clips)
    out = [model.forward(clips[i:i + batch_size]) for i in range(0, len(clips), batch_size)]
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, len(ATTRIBUTES)))


# cross validation

def fold_assignment(n: int, folds: int, seed: int):
    """Fold index per clip: a seeded permutation dealt round robin, so fold
    sizes differ by at most one."""
    if n < folds:
        raise ValueError(f"need at least {folds} clips for {folds}-fold cross validation, got {n}")
    order = SeededRng(seed).child(0).permutation(n)
    fold = np.empty(n, dtype=np.int64)
    fold[order] = np.arange(n) % folds
    return fold


@dataclass
class FoldReport:
    fold: int
    train_size: int
    validation_size: int
    validation_clips: list
    mae: tuple
    accuracy: tuple
    history: list

    def to_dict(self):
        d = asdict(self)
        d["history"] = [round(r.loss, 6) for r in self.history]
        return d


def cross_validate(clips, targets, config: TrainConfig = TrainConfig(), clip_ids=None,
                   model_factory=None, log_dir=None):
    """Train one fresh model per fold; returns ``config.folds`` FoldReports."""
    clips = np.asarray(clips)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(clips)
    ids = list(clip_ids) if clip_ids is not None else [str(i) for i in range(n)]
    fold_of = fold_assignment(n, config.folds, config.seed)
    factory = model_factory or (lambda k: build_model(rng=SeededRng(config.seed).child(1000 + k)))
    reports = []
    for k in range(config.folds):
        val = np.flatnonzero(fold_of == k)
        tr = np.flatnonzero(fold_of != k)
        model = factory(k)
        log_path = Path(log_dir) / f"fold{k}.jsonl" if log_dir else None
        history = train(model, clips[tr], targets[tr], config, log_path=log_path)
        pred = predict(model, clips[val])
        mae = np.abs(pred - targets[val]).mean(axis=0)
        reports.append(FoldReport(k, len(tr), len(val), [ids[i] for i in val],
                                  tuple(float(m) for m in mae),
                                  tuple(float((1 - m) * 100) for m in mae), history))
    return reports
