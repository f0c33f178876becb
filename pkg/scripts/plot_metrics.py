#!/usr/bin/env python3
"""Plot pixel accuracy and loss from one or more metric logs.

    python3 scripts/plot_metrics.py runs/compare/*/metrics*.jsonl -o curves.png

Needs matplotlib (``pip install -e .[plot]``).
"""

import argparse
import sys
from pathlib import Path

from fedseg.metrics import read_metrics


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("logs", nargs="+", type=Path)
    ap.add_argument("-o", "--output", type=Path, default=Path("metrics.png"))
    args = ap.parse_args()
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is not installed; pip install matplotlib", file=sys.stderr)
        return 1

    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(11, 4))
    for path in args.logs:
        recs = read_metrics(path)
        if not recs:
            continue
        x = [r.epoch for r in recs]
        label = f"{path.parent.name}/{path.stem}"
        ax_acc.plot(x, [r.pixel_accuracy for r in recs], label=label)
        ax_loss.plot(x, [r.loss for r in recs], label=label)
    ax_acc.set(xlabel="epoch", ylabel="pixel accuracy")
    ax_loss.set(xlabel="epoch", ylabel="loss", yscale="log")
    ax_acc.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)
    print(f"wrote {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
