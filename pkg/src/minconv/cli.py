"""Command-line entry point.

Subcommands: generate, train, eval, bench-scan, bench-epoch. Options can
come from a JSON config (--config) with command-line flags winning on
conflict; every run writes its resolved configuration next to its
outputs. Exit codes: 0 success, 1 usage error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import runtime
from .bench import (
    BenchError,
    bench_epoch,
    bench_scan,
    summarize_epochs,
    write_metrics_csv,
)
from .cells import CELL_KINDS
from .data import (
    GenerationError,
    NsConfig,
    StdfError,
    ingest_raw_grid,
    make_advection_split,
    make_navier_stokes_split,
    normalize_dataset,
    read_stdf,
    write_stdf,
)
from .network import (
    CheckpointError,
    ModelSpec,
    build_model,
    count_params,
    geo_preset,
    load_checkpoint,
    ns_preset,
    save_checkpoint,
)
from .tensor import ConfigError, ContractError, DomainError, NumericError, ShapeError
from .trainer import PersistenceBaseline, TrainConfig, evaluate, fit, summarize_rmse

PRESETS = ("ns-desk", "ns-paper", "geo-desk", "adv-desk")
BACKENDS = ("sequential", "blelloch", "logdomain")

_RUNTIME_ERRORS = (
    ConfigError, ContractError, ShapeError, DomainError, NumericError,
    StdfError, CheckpointError, GenerationError, BenchError, OSError,
)

CONFIG_KEYS = {
    "task", "model", "models", "preset", "backend", "seed", "seeds",
    "epochs", "workers", "paths", "overrides",
}
PATH_KEYS = {"out", "data", "raw", "checkpoint"}
OVERRIDE_KEYS = {
    "train", "val", "test", "grid", "frames", "downsample", "velocity",
    "diffusion", "crop_len", "tf_steps", "cl_steps", "lr", "weight_decay",
    "horizon", "sizes", "repeats", "channels", "layers", "raw_height",
    "raw_width", "raw_stride",
}

# split sizes: paper-scale and shrunk desk-scale defaults
SPLIT_COUNTS = {"ns-paper": (1000, 50, 200), "ns-desk": (200, 20, 50),
                "adv-desk": (200, 20, 50)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we contract 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="minconv", description=__doc__)
    sub = parser.add_subparsers(dest="task")

    def common(p):
        p.add_argument("--config", help="JSON run-config file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None,
                       help="worker threads (default: MINCONV_WORKERS or 1)")
        p.add_argument("--out", default=None)

    gen = sub.add_parser("generate", description="Generate or ingest a dataset")
    common(gen)
    gen.add_argument("--preset", choices=PRESETS, default=None)
    gen.add_argument("--raw", default=None, help="flat f32 frames to ingest (geo-desk)")

    tr = sub.add_parser("train", description="Train one model on an STDF dataset")
    common(tr)
    tr.add_argument("--model", choices=CELL_KINDS, default=None)
    tr.add_argument("--preset", choices=PRESETS, default=None,
                    help="model-size preset matching the dataset family")
    tr.add_argument("--data", default=None)
    tr.add_argument("--backend", choices=BACKENDS, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--seeds", default=None,
                    help="comma-separated seeds for a multi-seed run")

    ev = sub.add_parser("eval", description="Per-step RMSE of a checkpoint")
    common(ev)
    ev.add_argument("--checkpoint", default=None)
    ev.add_argument("--data", default=None)
    ev.add_argument("--backend", choices=BACKENDS, default=None)

    bs = sub.add_parser("bench-scan", description="Time the scan backends")
    common(bs)
    bs.add_argument("--backends", default=",".join(BACKENDS))

    be = sub.add_parser("bench-epoch", description="Time training epochs per model")
    common(be)
    be.add_argument("--models", default=None, help="comma-separated cell kinds")
    be.add_argument("--data", default=None)
    be.add_argument("--epochs", type=int, default=None)
    return parser


def _load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    paths = cfg.get("paths", {})
    if not isinstance(paths, dict) or set(paths) - PATH_KEYS:
        raise UsageError(f"paths may only contain {sorted(PATH_KEYS)}")
    over = cfg.get("overrides", {})
    if not isinstance(over, dict) or set(over) - OVERRIDE_KEYS:
        raise UsageError(f"overrides may only contain {sorted(OVERRIDE_KEYS)}")
    return cfg


def _resolve(args) -> dict:
    """Merge config file and flags; flags win."""
    cfg = _load_config(args.config) if getattr(args, "config", None) else {}
    resolved = {
        "task": args.task,
        "model": getattr(args, "model", None) or cfg.get("model"),
        "models": getattr(args, "models", None) or cfg.get("models"),
        "preset": getattr(args, "preset", None) or cfg.get("preset"),
        "backend": getattr(args, "backend", None) or cfg.get("backend"),
        "seed": args.seed if args.seed is not None else cfg.get("seed", 0),
        "seeds": getattr(args, "seeds", None) or cfg.get("seeds"),
        "epochs": getattr(args, "epochs", None) or cfg.get("epochs"),
        "workers": args.workers if args.workers is not None
                   else cfg.get("workers", runtime.default_workers()),
        "paths": dict(cfg.get("paths", {})),
        "overrides": dict(cfg.get("overrides", {})),
    }
    for key in ("out", "data", "raw", "checkpoint"):
        val = getattr(args, key, None)
        if val is not None:
            resolved["paths"][key] = val
    if getattr(args, "backends", None):
        resolved["overrides"].setdefault("sizes", resolved["overrides"].get("sizes"))
        resolved["backends"] = args.backends
    return resolved


def _write_resolved(resolved: dict, out_path: Path) -> None:
    out_path.parent.mkdir(parents=True, exist_ok=True)
    snap = dict(resolved)
    with open(out_path.with_suffix(out_path.suffix + ".run.json"), "w",
              encoding="utf-8") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True, default=str)


def _require(resolved, key, flag):
    val = resolved.get(key) if key != "out" else resolved["paths"].get("out")
    if key in ("data", "raw", "checkpoint"):
        val = resolved["paths"].get(key)
    if not val:
        raise UsageError(f"{flag} is required for task {resolved['task']}")
    return val


def _generate(resolved) -> int:
    preset = _require(resolved, "preset", "--preset")
    out = Path(_require(resolved, "out", "--out"))
    over = resolved["overrides"]
    seed = int(resolved["seed"])

    if preset == "geo-desk":
        raw = resolved["paths"].get("raw")
        if not raw:
            raise UsageError("--raw is required for geo-desk "
                             "(flat little-endian f32 frames)")
        ds = ingest_raw_grid(raw, int(over.get("raw_height", 32)),
                             int(over.get("raw_width", 64)),
                             stride=int(over.get("raw_stride", 2)))
        write_stdf(out, ds.data, ds.stats)
        _write_resolved(resolved, out)
        print(f"ingested {ds.shape} -> {out}")
        return 0

    counts = (int(over.get("train", SPLIT_COUNTS[preset][0])),
              int(over.get("val", SPLIT_COUNTS[preset][1])),
              int(over.get("test", SPLIT_COUNTS[preset][2])))
    if preset in ("ns-desk", "ns-paper"):
        ns_cfg = NsConfig(n=int(over.get("grid", 64)),
                          frames=int(over.get("frames", 50)))
        factor = int(over.get("downsample", 4))
        splits = {s: make_navier_stokes_split(ns_cfg, c, s, seed, factor)
                  for s, c in zip(("train", "val", "test"), counts)}
    else:  # adv-desk
        vel = over.get("velocity", (1.0, 0.0))
        splits = {s: make_advection_split(int(over.get("grid", 16)),
                                          int(over.get("frames", 25)), c, s, seed,
                                          velocity=tuple(vel),
                                          diffusion=float(over.get("diffusion", 0.05)))
                  for s, c in zip(("train", "val", "test"), counts)}
    norm_train, stats = normalize_dataset(splits["train"])
    paths = {"train": out,
             "val": out.with_suffix(".val.stdf"),
             "test": out.with_suffix(".test.stdf")}
    write_stdf(paths["train"], norm_train.astype(np.float32), stats)
    for split in ("val", "test"):
        norm, _ = normalize_dataset(splits[split], stats)
        write_stdf(paths[split], norm.astype(np.float32), stats)
    _write_resolved(resolved, out)
    print(f"wrote {paths['train']} {norm_train.shape} (+ val/test siblings)")
    return 0


def _model_spec(resolved, kind) -> ModelSpec:
    over = resolved["overrides"]
    backend = resolved.get("backend") or "blelloch"
    if resolved.get("preset") in ("ns-desk", "ns-paper"):
        spec = ns_preset(kind, backend=backend)
    elif resolved.get("preset") == "geo-desk":
        spec = geo_preset(kind, backend=backend)
    else:
        spec = ModelSpec(cell=kind, channels=int(over.get("channels", 8)),
                         layers=int(over.get("layers", 2)), backend=backend)
    return spec


def _train_cfg(resolved, epochs_default=30) -> TrainConfig:
    over = resolved["overrides"]
    tf = int(over.get("tf_steps", 20))
    cl = int(over.get("cl_steps", 5))
    return TrainConfig(
        epochs=int(resolved.get("epochs") or epochs_default),
        lr=float(over.get("lr", 5e-4)),
        weight_decay=float(over.get("weight_decay", 1e-2)),
        crop_len=int(over.get("crop_len", tf + cl)),
        tf_steps=tf, cl_steps=cl,
        seed=int(resolved["seed"]),
        backend=resolved.get("backend"),
        workers=int(resolved["workers"]),
    )


def _train(resolved) -> int:
    kind = _require(resolved, "model", "--model")
    data_path = _require(resolved, "data", "--data")
    out = Path(resolved["paths"].get("out") or "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    dataset = read_stdf(data_path)
    cfg = _train_cfg(resolved)
    seeds = ([int(s) for s in str(resolved["seeds"]).split(",")]
             if resolved.get("seeds") else [int(resolved["seed"])])
    runtime.set_workers(int(resolved["workers"]))
    rows = []
    for seed in seeds:
        spec = _model_spec(resolved, kind)
        model = build_model(spec, seed=seed)
        run_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
        record = fit(model, dataset.data, run_cfg)
        ckpt = out / f"{kind}-seed{seed}.mcwt"
        save_checkpoint(model, ckpt)
        for epoch, (loss, secs) in enumerate(zip(record.train_loss,
                                                 record.epoch_seconds)):
            rows.append({"model": kind, "seed": seed, "epoch": epoch,
                         "loss": loss, "seconds": secs,
                         "workers": resolved["workers"]})
        print(f"{kind} seed {seed}: params={count_params(model)} "
              f"final loss={record.train_loss[-1]:.5f} -> {ckpt}")
    metrics_path = out / "train_metrics.csv"
    write_metrics_csv(rows, metrics_path)
    _write_resolved(resolved, metrics_path)
    return 0


def _eval(resolved) -> int:
    ckpt = _require(resolved, "checkpoint", "--checkpoint")
    data_path = _require(resolved, "data", "--data")
    out = Path(resolved["paths"].get("out") or "runs/eval_rmse.csv")
    over = resolved["overrides"]
    model = load_checkpoint(ckpt)
    dataset = read_stdf(data_path)
    runtime.set_workers(int(resolved["workers"]))
    tf = int(over.get("tf_steps", 20))
    horizon = over.get("horizon")
    per_step = evaluate(model, dataset.data, tf_steps=tf,
                        horizon=int(horizon) if horizon else None)
    base = evaluate(PersistenceBaseline(), dataset.data, tf_steps=tf,
                    horizon=int(horizon) if horizon else None)
    rows = [{"step": i + 1, "value": float(v), "model": model.spec.cell,
             "persistence": float(b)}
            for i, (v, b) in enumerate(zip(per_step, base))]
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out)
    _write_resolved(resolved, out)
    r_tf, r_cl = summarize_rmse(per_step, tf)
    print(f"RMSE_TF={r_tf:.5f} RMSE_CL={r_cl:.5f} -> {out}")
    return 0


def _bench_scan(resolved, backends_arg) -> int:
    out = Path(resolved["paths"].get("out") or "runs/bench_scan.csv")
    over = resolved["overrides"]
    sizes = over.get("sizes") or [4, 16, 32]
    if isinstance(sizes, str):
        sizes = [int(s) for s in sizes.split(",")]
    backends = tuple(backends_arg.split(",")) if backends_arg else BACKENDS
    rows = bench_scan([int(s) for s in sizes],
                      repeats=int(over.get("repeats", 10)),
                      backends=backends, workers=int(resolved["workers"]),
                      seed=int(resolved["seed"]))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out)
    _write_resolved(resolved, out)
    for row in rows:
        print(f"{row['size']:>5} {row['backend']:<12} "
              f"{row['median_seconds'] * 1e3:9.3f} ms "
              f"x{row['speedup_vs_sequential']:.2f}")
    return 0


def _bench_epoch(resolved) -> int:
    data_path = _require(resolved, "data", "--data")
    out = Path(resolved["paths"].get("out") or "runs/bench_epoch.csv")
    kinds = (str(resolved["models"]).split(",") if resolved.get("models")
             else list(CELL_KINDS))
    for kind in kinds:
        if kind not in CELL_KINDS:
            raise UsageError(f"unknown model kind {kind!r}")
    dataset = read_stdf(data_path)
    over = resolved["overrides"]
    tf = int(over.get("tf_steps", 20))
    cl = int(over.get("cl_steps", 5))
    cfg = TrainConfig(epochs=int(resolved.get("epochs") or 6), tf_steps=tf,
                      cl_steps=cl, crop_len=tf + cl,
                      workers=int(resolved["workers"]))
    rows = bench_epoch(kinds, dataset.data, cfg,
                       epochs=int(resolved.get("epochs") or 6),
                       seed=int(resolved["seed"]),
                       channels=int(over.get("channels", 8)),
                       layers=int(over.get("layers", 2)),
                       workers=int(resolved["workers"]))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out)
    _write_resolved(resolved, out)
    for summary in summarize_epochs(rows):
        print(f"{summary['model']:<16} {summary['mean_seconds']:8.3f} s "
              f"+- {summary['std_seconds']:.3f}")
    return 0


def cli_main(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.task is None:
            raise UsageError("a subcommand is required")
        resolved = _resolve(args)
        runtime.set_workers(int(resolved["workers"]))
        if args.task == "generate":
            return _generate(resolved)
        if args.task == "train":
            return _train(resolved)
        if args.task == "eval":
            return _eval(resolved)
        if args.task == "bench-scan":
            return _bench_scan(resolved, getattr(args, "backends", None))
        if args.task == "bench-epoch":
            return _bench_epoch(resolved)
        raise UsageError(f"unknown task {args.task!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
