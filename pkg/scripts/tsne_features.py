"""Embed the backbone features of a cross-validation run's best network with t-SNE.

Typical use on a 4-class run produced by ``glom cv``:

    python scripts/tsne_features.py --run runs/four --data data/four --out runs/four/tsne
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from glom.checkpoint import load_checkpoint
from glom.data import load_dataset
from glom.nn import extract_features
from glom.tsne import TsneConfig, cluster_purity, emit_scatter, tsne


def best_fold(traces: Path) -> int:
    peaks = {}
    with open(traces, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            f = int(row["fold"])
            peaks[f] = max(peaks.get(f, 0.0), float(row["val_acc"]))
    return min(peaks, key=lambda f: (-peaks[f], f))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run", type=Path, required=True, help="glom cv output directory")
    ap.add_argument("--data", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--perplexity", type=float, default=30.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    traces = next(args.run.rglob("traces.csv"))
    fold = best_fold(traces)
    ckpt = load_checkpoint(args.run / "checkpoints" / f"fold{fold}.glom")
    data = load_dataset(args.data, ckpt.spec.input_shape[-1])
    feats = extract_features(ckpt, data.images).astype(np.float64)
    emb, _ = tsne(feats, TsneConfig(perplexity=args.perplexity, seed=args.seed))
    emit_scatter(emb, data.labels, args.out, ids=data.ids, class_names=data.class_names)
    print(f"fold {fold}: KL {emb.kl_initial:.3f} -> {emb.kl:.3f}, centroid purity {cluster_purity(emb.Y, data.labels):.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
