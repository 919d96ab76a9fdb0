"""Synthesize a dataset, train the model on it and evaluate on the held-out split.

    python scripts/synthetic_experiment.py --out runs/e2e --clips 2000 --epochs 40
"""
import argparse
import json
import time
from pathlib import Path

from echoqa import ATTRIBUTES
from echoqa.cli import main


def run(argv):
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(code)


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--clips", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--size", type=int, default=64)
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    data, model = args.out / "data", args.out / "model"
    t0 = time.perf_counter()
    if not (data / "test.jsonl").exists():
        run(["synth", "--clips", args.clips, "--size", args.size, "--seed", args.seed, "--out", data])
    run(["train", "--data", data, "--epochs", args.epochs, "--seed", args.seed, "--out", model])
    run(["eval", "--checkpoint", model / "model.ckpt", "--data", data, "--out", model])
    loss = json.loads((model / "history.json").read_text())["loss"]
    acc = json.loads((model / "eval_report.json").read_text())["accuracy"]
    print(f"\ntraining MAE: first epoch {loss[0]:.4f}, last {loss[-1]:.4f}")
    if len(loss) >= 10:
        print(f"epoch 10 / epoch 1 = {loss[9] / loss[0]:.3f}")
    print("held-out accuracy: " + ", ".join(f"{a} {acc[a]:.2f}%" for a in ATTRIBUTES))
    print(f"wall time {(time.perf_counter() - t0) / 60:.1f} min")
