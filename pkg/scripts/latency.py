"""Run the latency benchmark twice on the full-size model and compare medians.

    python scripts/latency.py --out runs/bench [--checkpoint model.ckpt]
"""
import argparse
import json
from pathlib import Path

from echoqa.cli import main

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--size", type=int, default=224)
    args = p.parse_args()
    medians = []
    for k in range(2):
        argv = ["bench", "--size", str(args.size), "--out", str(args.out / f"run{k}")]
        if args.checkpoint:
            argv += ["--checkpoint", args.checkpoint]
        if main(argv):
            raise SystemExit(1)
        rep = json.loads((args.out / f"run{k}" / "latency_report.json").read_text())
        medians.append(rep["combined_parallel"]["median"])
    drift = abs(medians[0] - medians[1]) / min(medians)
    print(f"\nparallel medians {medians[0]:.3f} / {medians[1]:.3f} ms per frame, drift {drift:.1%}")
