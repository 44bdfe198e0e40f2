"""Runtime benchmarks and the CSV emitter.

Every timed computation is preceded by a correctness cross-check; a
benchmark that cannot verify its outputs aborts instead of reporting.
Scan timings use the median of the repeats (warm-up excluded); epoch
timings report one row per epoch so mean/std over epochs 2..6 can be
taken downstream.
"""

from __future__ import annotations

import csv
import time
from dataclasses import replace

import numpy as np

from . import runtime
from .network import ModelSpec, build_model
from .scan import ScanCoeffs, scan
from .tensor import ContractError, Tape
from .trainer import AdamState, TrainConfig, adamw_step, training_loss

SCAN_BACKENDS = ("sequential", "blelloch", "logdomain")


class BenchError(RuntimeError):
    """A benchmark's correctness gate failed; nothing was timed."""


def _gate_like_coeffs(rng, shape, dtype=np.float32) -> ScanCoeffs:
    a = 1.0 / (1.0 + np.exp(-rng.standard_normal(shape)))
    b = rng.uniform(-1.0, 1.0, size=shape)
    h0 = rng.uniform(-1.0, 1.0, size=shape[:1] + shape[2:])
    return ScanCoeffs(h0=h0.astype(dtype), a=a.astype(dtype), b=b.astype(dtype))


def _median_time(fn, repeats: int) -> float:
    fn()  # warm-up, excluded
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_scan(sizes, batch: int = 4, steps: int = 100, channels: int = 1,
               repeats: int = 10, backends=SCAN_BACKENDS,
               workers: int | None = None, seed: int = 0) -> list[dict]:
    """Time the scan backends on (B,T,C,H,W) lanes for each H=W size."""
    workers = runtime.get_workers() if workers is None else workers
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        coeffs = _gate_like_coeffs(rng, (batch, steps, channels, size, size))
        ref = scan(coeffs, "sequential", workers=1)
        timings = {}
        for backend in backends:
            out = scan(coeffs, backend, workers=workers)
            err = float(np.max(np.abs(out - ref)))
            if err > 1e-5:
                raise BenchError(
                    f"{backend} disagrees with sequential by {err:.2e} at {size}x{size}")
            timings[backend] = _median_time(
                lambda b=backend: scan(coeffs, b, workers=workers), repeats)
        seq_t = timings.get("sequential")
        for backend in backends:
            rows.append({
                "size": size,
                "backend": backend,
                "workers": workers,
                "repeats": repeats,
                "median_seconds": timings[backend],
                "speedup_vs_sequential":
                    (seq_t / timings[backend]) if seq_t else float("nan"),
            })
    return rows


def _crosscheck_model(model, frames) -> None:
    if model.spec.cell in ("convlstm", "convgru"):
        a = model.forward_tf(frames, backend="sequential").data
        b = model.forward_tf(frames, backend="sequential").data
        if not np.array_equal(a, b):
            raise BenchError(f"{model.spec.cell} forward is not deterministic")
        if not np.isfinite(a).all():
            raise BenchError(f"{model.spec.cell} forward produced non-finite values")
        return
    a = model.forward_tf(frames, backend="sequential").data
    b = model.forward_tf(frames, backend="blelloch").data
    err = float(np.max(np.abs(a - b)))
    if err > 1e-5:
        raise BenchError(
            f"{model.spec.cell} backends disagree by {err:.2e} before timing")


def _one_training_step(model, crop, cfg, state) -> None:
    tape = Tape()
    loss, params = training_loss(model, crop, cfg, tape)
    grads_by_id = tape.backward(loss)
    grads = {name: grads_by_id[p.node].data for name, p in params.items()}
    adamw_step(model.params, grads, state, lr=0.0, weight_decay=0.0)


def time_training_step(model, frames: np.ndarray, cfg: TrainConfig,
                       repeats: int = 5) -> float:
    """Median seconds for one forward+backward+update on a fixed crop.

    lr=0 keeps parameters fixed so repeats time identical work.
    """
    crop = np.asarray(frames)[:1, :cfg.crop_len]
    _crosscheck_model(model, crop[:, :cfg.tf_steps])
    state = AdamState.zeros_like(model.params)
    return _median_time(lambda: _one_training_step(model, crop, cfg, state), repeats)


def bench_training_step(kinds, steps: int = 100, size: int = 16,
                        channels: int = 8, layers: int = 2, repeats: int = 5,
                        tf_steps: int | None = None, seed: int = 0,
                        workers: int | None = None) -> list[dict]:
    """Training-step wall time per cell kind on a T-step sequence."""
    workers = runtime.get_workers() if workers is None else workers
    tf = tf_steps if tf_steps is not None else steps - 5
    cfg = TrainConfig(epochs=1, crop_len=steps, tf_steps=tf, cl_steps=steps - tf,
                      seed=seed, workers=workers)
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((1, steps, 1, size, size)).astype(np.float32)
    rows = []
    for kind in kinds:
        spec = ModelSpec(cell=kind, channels=channels, layers=layers)
        model = build_model(spec, seed=seed)
        seconds = time_training_step(model, frames, cfg, repeats)
        rows.append({
            "model": kind,
            "backend": "sequential" if kind in ("convlstm", "convgru") else spec.backend,
            "workers": workers,
            "steps": steps,
            "size": size,
            "step_seconds": seconds,
        })
    return rows


def bench_epoch(kinds, dataset: np.ndarray, cfg: TrainConfig, epochs: int = 6,
                seed: int = 0, channels: int = 8, layers: int = 2,
                workers: int | None = None) -> list[dict]:
    """Seconds per training epoch, one row per (model, epoch)."""
    from .trainer import train_epoch

    workers = runtime.get_workers() if workers is None else workers
    cfg = replace(cfg, seed=seed, workers=workers)
    rows = []
    for kind in kinds:
        spec = ModelSpec(cell=kind, channels=channels, layers=layers)
        model = build_model(spec, seed=seed)
        _crosscheck_model(model, np.asarray(dataset)[:1, :cfg.tf_steps])
        state = AdamState.zeros_like(model.params)
        for epoch in range(epochs):
            # fixed lr: the schedule is irrelevant to timing
            stats = train_epoch(model, dataset, cfg, state, epoch, lr=cfg.lr)
            rows.append({
                "model": kind,
                "backend": "sequential" if kind in ("convlstm", "convgru") else spec.backend,
                "epoch": epoch,
                "seconds": stats.seconds,
                "seed": seed,
                "workers": workers,
            })
    return rows


def summarize_epochs(rows: list[dict], skip_first: int = 1) -> list[dict]:
    """Mean and std of epoch seconds, first epoch(s) omitted as warm-up."""
    by_model: dict[str, list[float]] = {}
    for row in rows:
        if int(row["epoch"]) >= skip_first:
            by_model.setdefault(row["model"], []).append(float(row["seconds"]))
    return [{"model": kind, "mean_seconds": float(np.mean(ts)),
             "std_seconds": float(np.std(ts)), "epochs": len(ts)}
            for kind, ts in by_model.items()]


def write_metrics_csv(records: list[dict], path, fieldnames=None) -> None:
    """Header plus one row per record; RFC-4180 quoting, UTF-8."""
    if fieldnames is None:
        if not records:
            raise ContractError("empty record list needs explicit fieldnames")
        fieldnames = list(records[0])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec)


def read_metrics_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]
