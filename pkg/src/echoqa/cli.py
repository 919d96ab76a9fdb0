"""echoqa command line: synth, train, eval, infer, bench.

Option values resolve as command-line flag, then config file (JSON; top-level
keys apply to every command, a sub-object named after the command overrides
them), then built-in default.  The effective configuration is echoed into
every output artifact.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import ATTRIBUTES
from .dataio import BANDS, ManifestRow, load_clips, read_manifest, read_pgm, write_jsonl
from .evaluation import MIN_ITERATIONS, benchmark_latency, evaluate
from .model import (
    InputSpec, build_model, checkpoint_id, default_stream_configs, dump_feature_maps,
    forward_clip, load_checkpoint, save_checkpoint,
)
from .synth import ParamDistribution, SynthConfig, generate_dataset
from .tensor import SeededRng, save_tensor
from .training import AugmentationSpec, TrainConfig, cross_validate, predict, train

LOCK_NAME = ".echoqa.lock"
SIDE_KEYS = ("VS", "LC", "DG", "FS")

DEFAULTS = {
    "seed": 0,
    "out": ".",
    "synth": {"clips": 2000, "split": 0.8, "frames": 3, "size": 64},
    "train": {"data": None, "manifest": "train.jsonl", "epochs": 40, "batch_size": 32, "lr": 0.002,
              "momentum": 0.95, "decay_factor": 0.1, "decay_interval": 24, "augment": True,
              "cv": 0, "checkpoint_every": 0, "recalibrate_bn": True, "lstm_hidden": 32, "dense": [64, 16]},
    "eval": {"checkpoint": None, "data": None, "manifest": "test.jsonl"},
    "infer": {"checkpoint": None, "data": None, "manifest": None, "clip_id": None, "dump_features": None},
    "bench": {"checkpoint": None, "size": 224, "frames": 3, "iters": MIN_ITERATIONS, "warmup": 10,
              "sequential": False},
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", default=None, help="output directory")


def build_parser():
    parser = _Parser(prog="echoqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--clips", type=int)
    p.add_argument("--split", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int)

    p = sub.add_parser("train", help="train a model (or cross-validate with --cv)")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--decay-interval", type=int)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    p.add_argument("--no-recalibrate", dest="recalibrate_bn", action="store_const", const=False,
                   help="keep the running batch-norm statistics from training")
    p.add_argument("--cv", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--lstm-hidden", type=int)
    p.add_argument("--dense", type=lambda s: [int(v) for v in s.split(",")])

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--manifest")

    p = sub.add_parser("infer", help="score clips and write sidecar records")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset directory (with --manifest) or base of frame paths")
    p.add_argument("--manifest")
    p.add_argument("--clip-id", help="clip id for frames given on the command line")
    p.add_argument("--dump-features", help="stream,layer")
    p.add_argument("frames", nargs="*", help="PGM frames of one clip, in order")

    p = sub.add_parser("bench", help="inference latency benchmark")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--size", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--sequential", action="store_const", const=True)
    return parser


def resolve(args) -> dict:
    """Merge flags > config file > defaults for ``args.command``."""
    cmd = args.command
    effective = {"seed": DEFAULTS["seed"], "out": DEFAULTS["out"], **DEFAULTS[cmd]}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from e
        layered = {k: v for k, v in cfg.items() if k not in DEFAULTS or k in ("seed", "out")}
        layered.update(cfg.get(cmd, {}))
        for k, v in layered.items():
            if k in effective:
                effective[k] = v
    for k, v in vars(args).items():
        if k in effective and v is not None:
            effective[k] = v
    return effective


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"output directory {out} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, separators=(", ", ": ")) + "\n")


# commands

def cmd_synth(cfg):
    out = Path(cfg["out"])
    size = int(cfg["size"])
    train_rows, test_rows = generate_dataset(
        int(cfg["clips"]), out, ParamDistribution(T=int(cfg["frames"])), float(cfg["split"]),
        SeededRng(int(cfg["seed"])), SynthConfig(height=size, width=size))
    _dump(out / "synth_config.json", cfg)
    for name, rows in (("train", train_rows), ("test", test_rows)):
        counts = {b: sum(r.band == b for r in rows) for b in BANDS}
        print(f"{name}: {len(rows)} clips  " + "  ".join(f"{b}={counts[b]}" for b in BANDS))
    return 0


def _dataset(cfg, default_manifest):
    if not cfg.get("data"):
        raise CliError("--data is required")
    root = Path(cfg["data"])
    rows = read_manifest(root / (cfg.get("manifest") or default_manifest))
    if not rows:
        raise CliError(f"manifest {root / cfg['manifest']} is empty")
    clips, targets = load_clips(rows, root)
    return rows, clips, targets


def _train_config(cfg):
    return TrainConfig(batch_size=int(cfg["batch_size"]), epochs=int(cfg["epochs"]),
                       folds=int(cfg["cv"]) if cfg["cv"] else 5, seed=int(cfg["seed"]),
                       learning_rate=float(cfg["lr"]), momentum=float(cfg["momentum"]),
                       decay_factor=float(cfg["decay_factor"]), decay_interval=int(cfg["decay_interval"]),
                       augment=bool(cfg["augment"]), augmentation=AugmentationSpec(),
                       checkpoint_every=int(cfg["checkpoint_every"]),
                       recalibrate_bn=bool(cfg["recalibrate_bn"]))


def cmd_train(cfg):
    out = Path(cfg["out"])
    rows, clips, targets = _dataset(cfg, "train.jsonl")
    spec = InputSpec(*clips.shape[1:])
    tc = _train_config(cfg)
    configs = default_stream_configs(int(cfg["lstm_hidden"]), tuple(cfg["dense"]))

    def factory(k):
        return build_model(spec, configs, SeededRng(tc.seed).child(1000 + k))

    if cfg["cv"]:
        reports = cross_validate(clips, targets, tc, [r.clip_id for r in rows], factory, log_dir=out)
        write_jsonl(out / "cv_reports.jsonl", [r.to_dict() for r in reports])
        for r in reports:
            print(f"fold {r.fold}: n_val={r.validation_size} "
                  + " ".join(f"{a}={acc:.2f}%" for a, acc in zip(ATTRIBUTES, r.accuracy)))
        _dump(out / "train_config.json", cfg)
        return 0
    model = build_model(spec, configs, SeededRng(tc.seed).child(1000))
    history = train(model, clips, targets, tc, log_path=out / "train_log.jsonl", checkpoint_dir=out)
    ckpt = save_checkpoint(model, out / "model.ckpt")
    _dump(out / "train_config.json", cfg)
    _dump(out / "history.json", {"checkpoint_id": ckpt, "config": cfg,
                                 "loss": [round(r.loss, 6) for r in history]})
    for r in history:
        print(f"epoch {r.epoch + 1}: mae={r.loss:.6f} lr={r.lr:g}")
    print(f"checkpoint {out / 'model.ckpt'} ({ckpt})")
    return 0


def _load(cfg):
    if not cfg.get("checkpoint"):
        raise CliError("--checkpoint is required")
    path = Path(cfg["checkpoint"])
    model = load_checkpoint(path)
    return model, checkpoint_id(path.read_bytes())


def cmd_eval(cfg):
    out = Path(cfg["out"])
    model, ckpt = _load(cfg)
    rows, clips, targets = _dataset(cfg, "test.jsonl")
    if clips.shape[1:] != model.spec.clip_shape:
        raise CliError(f"clips {clips.shape[1:]} do not match checkpoint input {model.spec.clip_shape}")
    pred = predict(model, clips)
    report = evaluate(pred, targets, [r.raw_scores for r in rows])
    err = np.abs(pred - targets)
    write_jsonl(out / "per_sample_errors.jsonl", [
        {"clip_id": r.clip_id, "band": r.band, "prediction": [round(float(v), 6) for v in p],
         "target": [round(float(v), 6) for v in t], "abs_error": [round(float(v), 6) for v in e]}
        for r, p, t, e in zip(rows, pred, targets, err)])
    record = json.loads(report.to_json())
    record["checkpoint_id"] = ckpt
    record["config"] = cfg
    _dump(out / "eval_report.json", record)
    print(report.table())
    return 0


def sidecar_record(clip_id, scores, ckpt, timestamp=None) -> dict:
    vals = [float(v) for v in scores.as_tuple()]
    rec = {"clip_id": clip_id}
    rec.update(zip(SIDE_KEYS, vals))
    rec["AS"] = float(np.mean(vals))
    rec["checkpoint_id"] = ckpt
    rec["timestamp"] = timestamp or datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return rec


def write_sidecar(path, record) -> None:
    _dump(path, {k: record[k] for k in ("clip_id", *SIDE_KEYS, "AS", "checkpoint_id", "timestamp")})


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text())


def _clips_for_infer(cfg, frames, model):
    if frames:
        base = Path(cfg["data"]) if cfg.get("data") else Path(".")
        clip_id = cfg.get("clip_id") or Path(frames[0]).stem.rsplit("_", 1)[0]
        return [(clip_id, [base / f for f in frames])]
    if not (cfg.get("data") and cfg.get("manifest")):
        raise CliError("give frame paths, or --data with --manifest")
    root = Path(cfg["data"])
    return [(r.clip_id, [root / p for p in r.frames]) for r in read_manifest(root / cfg["manifest"])]


def cmd_infer(cfg, frames=()):
    out = Path(cfg["out"])
    model, ckpt = _load(cfg)
    dump = None
    if cfg.get("dump_features"):
        try:
            stream, layer = cfg["dump_features"].split(",")
            dump = (int(stream) if stream.isdigit() else stream, int(layer))
        except ValueError:
            raise CliError("--dump-features expects stream,layer") from None
    for clip_id, paths in _clips_for_infer(cfg, frames, model):
        if len(paths) != model.spec.frames:
            raise CliError(f"{clip_id}: expected {model.spec.frames} frames, got {len(paths)}")
        try:
            stack = np.stack([read_pgm(p) for p in paths])
        except (OSError, ValueError) as e:
            raise CliError(f"{clip_id}: cannot decode frames: {e}") from e
        clip = (stack.astype(np.float32) / np.float32(255))[:, None]
        scores = forward_clip(model, clip)
        rec = sidecar_record(clip_id, scores, ckpt)
        write_sidecar(out / f"{clip_id}.scores.json", rec)
        print(" ".join(f"{k}={rec[k]:.4f}" for k in (*SIDE_KEYS, "AS")) + f"  {clip_id}")
        if dump:
            fmap = dump_feature_maps(model, clip, *dump)
            save_tensor(out / f"{clip_id}.features.{dump[0]}.{dump[1]}.tensor", fmap)
    return 0


def cmd_bench(cfg):
    out = Path(cfg["out"])
    iters, warmup = int(cfg["iters"]), int(cfg["warmup"])
    if iters < MIN_ITERATIONS:
        raise CliError(f"--iters must be >= {MIN_ITERATIONS}, got {iters}")
    if cfg.get("checkpoint"):
        model, _ = _load(cfg)
    else:
        size = int(cfg["size"])
        model = build_model(InputSpec(int(cfg["frames"]), 1, size, size), rng=SeededRng(int(cfg["seed"])))
    clip = SeededRng(int(cfg["seed"])).child(1).uniform(size=model.spec.clip_shape).astype(np.float32)
    report = benchmark_latency(model, clip, warmup=warmup, iterations=iters)
    record = json.loads(report.to_json())
    record["mode"] = "sequential" if cfg["sequential"] else "parallel"
    record["config"] = cfg
    _dump(out / "latency_report.json", record)
    head = report.combined_sequential if cfg["sequential"] else report.combined_parallel
    print(f"combined ({record['mode']}) median {head.median:.3f} ms/frame")
    print(report.table())
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
        with output_lock(Path(cfg["out"])):
            if args.command == "infer":
                return cmd_infer(cfg, args.frames)
            return COMMANDS[args.command](cfg)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001 - every failure becomes one stderr line
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"echoqa: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
