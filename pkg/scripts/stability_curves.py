"""Plot per-fold validation accuracy against epoch from one or more traces.csv files."""

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def load(path):
    curves = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            curves[int(row["fold"])].append((int(row["epoch"]), float(row["val_acc"])))
    return {f: np.array(sorted(v)) for f, v in curves.items()}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("traces", nargs="+", type=Path)
    ap.add_argument("--out", type=Path, default=Path("stability.png"))
    args = ap.parse_args(argv)
    fig, axes = plt.subplots(1, len(args.traces), figsize=(5 * len(args.traces), 3.5), squeeze=False)
    for ax, path in zip(axes[0], args.traces):
        curves = load(path)
        for fold, c in curves.items():
            ax.plot(c[:, 0], c[:, 1], lw=0.8, alpha=0.6, label=f"fold {fold}")
        width = min(len(c) for c in curves.values())
        mean = np.mean([c[:width, 1] for c in curves.values()], axis=0)
        ax.plot(np.arange(1, width + 1), mean, "k", lw=2, label="mean")
        ax.set(title=path.parent.name or str(path), xlabel="epoch", ylabel="validation accuracy", ylim=(0, 1.02))
        print(f"{path}: final mean {mean[-1]:.3f}, best epochs "
              f"{[int(c[np.argmax(c[:, 1]), 0]) for c in curves.values()]}")
    axes[0][0].legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    return 0


if __name__ == "__main__":
    sys.exit(main())
