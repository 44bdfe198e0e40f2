"""Optimization loop: decoupled-weight-decay Adam, cosine schedule, random
temporal crops, teacher-forcing plus closed-loop loss, RMSE evaluation.

A training step crops ``tf_steps + cl_steps`` frames, teacher-forces the
first ``tf_steps`` inputs, feeds predictions back for the remaining
steps, and takes the mean squared error over every predicted frame with
equal weight.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .network import Model, model_forward_tf, model_step
from .tensor import (
    ConfigError,
    ShapeError,
    Tape,
    constant,
    reduce,
    scale,
    stack_time,
    time_index,
    zip_binary,
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 5e-4
    weight_decay: float = 1e-2
    batch_size: int = 1
    crop_len: int = 25
    tf_steps: int = 20
    cl_steps: int = 5
    seed: int = 0
    backend: str | None = None
    workers: int | None = None

    def __post_init__(self):
        if self.crop_len != self.tf_steps + self.cl_steps:
            raise ConfigError("crop_len must equal tf_steps + cl_steps")
        if self.tf_steps < 1:
            raise ConfigError("tf_steps must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")


@dataclass
class MetricsRecord:
    model_kind: str
    seed: int
    train_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    rmse: np.ndarray | None = None
    updates: int = 0
    skips: int = 0


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamState, lr: float, weight_decay: float = 1e-2,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """Bias-corrected Adam plus decoupled decay, in place.

    Returns False (and changes nothing) if any gradient is non-finite.
    """
    for g in grads.values():
        if not np.isfinite(g).all():
            return False
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= lr * weight_decay * p
    return True


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """lr(e) = lr0 * 0.5 * (1 + cos(pi * e / E)); decays all the way to zero."""
    if total_epochs <= 0:
        raise ConfigError("total epoch count must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * 0.5 * (1.0 + float(np.cos(np.pi * epoch / total_epochs)))


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.sqrt(np.mean(d * d)))


def _sum_sq(pred, target) -> tuple:
    d = zip_binary(pred, constant(target, dtype=pred.data.dtype), "sub")
    return reduce(zip_binary(d, d, "mul"), None, "sum"), int(np.prod(target.shape))


def training_loss(model: Model, crop: np.ndarray, cfg: TrainConfig, tape: Tape):
    """Scalar loss over the teacher-forced and fed-back predictions of a crop."""
    params = model.bind(tape)
    spec = model.spec
    tf = cfg.tf_steps
    preds_tf, states = model_forward_tf(spec, params, crop[:, :tf],
                                        backend=cfg.backend, workers=cfg.workers)
    terms, count = _sum_sq(preds_tf, crop[:, 1:tf + 1])
    n_feedback = crop.shape[1] - 1 - tf
    if n_feedback > 0:
        x = time_index(preds_tf, tf - 1)
        cl = []
        for _ in range(n_feedback):
            x, states = model_step(spec, params, x, states)
            cl.append(x)
        s_cl, n_cl = _sum_sq(stack_time(cl), crop[:, tf + 1:])
        terms = zip_binary(terms, s_cl, "add")
        count += n_cl
    return scale(terms, 1.0 / count), params


@dataclass
class EpochStats:
    mean_loss: float
    seconds: float
    updates: int
    skips: int


def train_epoch(model: Model, data: np.ndarray, cfg: TrainConfig,
                state: AdamState, epoch: int, lr: float | None = None) -> EpochStats:
    """One pass of single-sample updates over random temporal crops."""
    data = np.asarray(data)
    n, t_total = data.shape[0], data.shape[1]
    if t_total < cfg.crop_len:
        raise ConfigError(f"sequences of length {t_total} are shorter than the "
                          f"{cfg.crop_len}-frame crop")
    if lr is None:
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
    rng = np.random.default_rng((cfg.seed, epoch, 0x5EED))
    samples = list(rng.permutation(n)) if n > 1 else [0] * max(1, t_total // cfg.crop_len)
    losses = []
    updates = skips = 0
    start = time.perf_counter()
    for idx in samples:
        s = int(rng.integers(0, t_total - cfg.crop_len + 1))
        crop = data[idx:idx + 1, s:s + cfg.crop_len]
        tape = Tape()
        loss, params = training_loss(model, crop, cfg, tape)
        if not np.isfinite(loss.data):
            skips += 1
            continue
        grads_by_id = tape.backward(loss)
        grads = {name: grads_by_id[p.node].data for name, p in params.items()}
        if adamw_step(model.params, grads, state, lr, cfg.weight_decay):
            updates += 1
            losses.append(loss.item())
        else:
            skips += 1
    seconds = time.perf_counter() - start
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return EpochStats(mean_loss, seconds, updates, skips)


def fit(model: Model, train_data: np.ndarray, cfg: TrainConfig,
        test_data: np.ndarray | None = None, tf_steps_eval: int | None = None,
        horizon: int | None = None) -> MetricsRecord:
    """Full training run; optionally evaluates per-step RMSE afterwards."""
    record = MetricsRecord(model_kind=model.spec.cell, seed=cfg.seed)
    state = AdamState.zeros_like(model.params)
    for epoch in range(cfg.epochs):
        stats = train_epoch(model, train_data, cfg, state, epoch)
        record.train_loss.append(stats.mean_loss)
        record.epoch_seconds.append(stats.seconds)
        record.updates += stats.updates
        record.skips += stats.skips
    if test_data is not None:
        record.rmse = evaluate(model, test_data,
                               tf_steps=tf_steps_eval or cfg.tf_steps,
                               horizon=horizon)
    return record


def evaluate(predictor, data: np.ndarray, tf_steps: int = 20,
             horizon: int | None = None) -> np.ndarray:
    """Per-step RMSE over a test set.

    ``predictor`` needs a ``predict_sequence(frames, tf_steps, horizon)``
    returning (B, horizon, C, H, W) predictions of frames 1..horizon.
    """
    data = np.asarray(data)
    t_total = data.shape[1]
    if horizon is None:
        horizon = t_total - 1
    if horizon > t_total - 1:
        raise ConfigError(f"horizon {horizon} exceeds the {t_total - 1} "
                          "predictable frames of the dataset")
    preds = np.asarray(predictor.predict_sequence(data, tf_steps, horizon))
    targets = data[:, 1:horizon + 1].astype(np.float64)
    d = preds.astype(np.float64) - targets
    return np.sqrt((d * d).mean(axis=(0, 2, 3, 4)))


def summarize_rmse(per_step: np.ndarray, tf_steps: int) -> tuple[float, float]:
    """(RMSE_TF, RMSE_CL): means over steps 1..tf and tf+1..horizon."""
    per_step = np.asarray(per_step)
    if not 1 <= tf_steps < per_step.size:
        raise ConfigError("tf_steps must split the horizon in two")
    return float(per_step[:tf_steps].mean()), float(per_step[tf_steps:].mean())


class PersistenceBaseline:
    """Repeats the most recent observed frame; the minimal skill bar."""

    def predict_sequence(self, frames: np.ndarray, tf_steps: int,
                         horizon: int | None = None) -> np.ndarray:
        frames = np.asarray(frames)
        if horizon is None:
            horizon = frames.shape[1] - 1
        steps = [frames[:, min(t - 1, tf_steps - 1)] for t in range(1, horizon + 1)]
        return np.stack(steps, axis=1)
