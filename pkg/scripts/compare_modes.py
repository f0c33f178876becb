#!/usr/bin/env python3
"""Train centralized, per-silo local and federated models on one task and compare them.

    python3 scripts/compare_modes.py --out runs/compare --rounds 50

Extra flags after ``--`` are passed to every run (e.g. ``-- --classes 6``).
"""

import argparse
import sys
from pathlib import Path

from fedseg.cli import main
from fedseg.metrics import read_metrics


def final(path: Path):
    recs = read_metrics(path)
    return recs[-1] if recs else None


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--silos", type=int, default=2)
    ap.add_argument("--rounds", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=1, help="local epochs per round")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("extra", nargs="*")
    args = ap.parse_args()

    out = Path(args.out)
    total = args.rounds * args.epochs
    common = ["--silos", str(args.silos), "--seed", str(args.seed), *args.extra]
    plan = {
        "centralized": ["--mode", "centralized", "--epochs", str(total)],
        "local": ["--mode", "local", "--epochs", str(total)],
        "federated": ["--mode", "federated", "--rounds", str(args.rounds), "--epochs", str(args.epochs)],
    }
    for name, flags in plan.items():
        print(f"== {name}", flush=True)
        code = main([*common, *flags, "--out", str(out / name)])
        if code:
            return code

    rows = [("centralized", final(out / "centralized" / "metrics.jsonl"))]
    rows += [(f"local silo {k}", final(out / "local" / f"metrics_silo{k}.jsonl")) for k in range(args.silos)]
    rows.append(("federated", final(out / "federated" / "metrics.jsonl")))
    print(f"\n{'run':<16} {'epochs':>6} {'loss':>9} {'pix_acc':>8} {'mIoU':>7}")
    for name, r in rows:
        miou = f"{r.mean_iou:.4f}" if r.mean_iou is not None else "n/a"
        print(f"{name:<16} {total:>6} {r.loss:>9.5f} {r.pixel_accuracy:>8.4f} {miou:>7}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
