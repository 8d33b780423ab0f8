"""Desk-scale proxy experiment on synthetic corpora.

Binary run: 2-class synthetic set, architecture 4 trained per fold, CNN-MLP
and CNN-SVM evaluated on the same folds.  Four-class run: each fold starts
from the best binary network with a fresh output layer and is fine-tuned, then
the SVM grid is searched on its features.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import kfold_split
from .selection import CVConfig, CVResult, cross_validate, emit_report, select_best_model
from .synth import SynthSpec, synth_generate
from .train import TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProxyConfig:
    seed: int = 7
    size: int = 64
    per_class: int = 200
    per_class_four: int = 100
    k: int = 10
    epochs: int = 30
    epochs_four: int = 12
    learning_rate: float = 1e-4
    dtype: str = "float32"
    jobs: int = 1
    top_kernels: int = 2  # linear must rank within this many kernels


@dataclass
class ProxyResult:
    config: ProxyConfig
    binary: CVResult
    four: CVResult
    seconds: dict = field(default_factory=dict)

    def kernel_ranking(self) -> list[tuple[str, float]]:
        best = self.four.grid.best_per_kernel()
        return sorted(((k, c.mean_acc) for k, c in best.items()), key=lambda kv: -kv[1])

    def linear_rank(self) -> int:
        """1 + number of kernels whose best cell strictly beats linear's best."""
        ranking = dict(self.kernel_ranking())
        return 1 + sum(acc > ranking["linear"] for acc in ranking.values())

    def checks(self) -> dict[str, tuple[bool, str]]:
        mlp = self.binary.summaries["cnn-mlp"].mean["ACC"]
        svm = self.binary.summaries["cnn-svm"].mean["ACC"]
        svm4 = self.four.summaries["cnn-svm"].mean["ACC"]
        rank = self.linear_rank()
        return {
            "binary CNN-MLP mean ACC >= 0.95": (mlp >= 0.95, f"{mlp:.4f}"),
            "binary CNN-SVM mean ACC >= CNN-MLP mean ACC": (svm >= mlp, f"{svm:.4f} vs {mlp:.4f}"),
            "4-class CNN-SVM mean ACC >= 0.85": (svm4 >= 0.85, f"{svm4:.4f}"),
            f"linear kernel within top {self.config.top_kernels}": (
                rank <= self.config.top_kernels,
                f"rank {rank}: " + ", ".join(f"{k} {a:.4f}" for k, a in self.kernel_ranking()),
            ),
        }


def _train_config(cfg: ProxyConfig, epochs: int) -> TrainConfig:
    return TrainConfig(epochs=epochs, learning_rate=cfg.learning_rate, dtype=cfg.dtype, seed=cfg.seed)


def run_proxy(cfg: ProxyConfig = ProxyConfig(), out_dir=None, progress=None) -> ProxyResult:
    t0 = time.perf_counter()
    seconds = {}
    binary = synth_generate(SynthSpec(size=cfg.size, per_class=cfg.per_class, seed=cfg.seed)).data
    plan = kfold_split(len(binary), cfg.k, seed=cfg.seed, labels=binary.labels)
    cv = CVConfig(train=_train_config(cfg, cfg.epochs), jobs=cfg.jobs, seed=cfg.seed)
    cb = None if progress is None else (lambda fold, rec: progress("binary", fold, rec))
    res2 = cross_validate(("cnn-mlp", "cnn-svm"), binary, plan, cv, progress=cb)
    seconds["binary"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    four = synth_generate(SynthSpec.four_class(size=cfg.size, per_class=cfg.per_class_four, seed=cfg.seed + 1)).data
    plan4 = kfold_split(len(four), cfg.k, seed=cfg.seed, labels=four.labels)
    _, source = select_best_model(res2.traces, res2.checkpoints)
    cv4 = CVConfig(train=_train_config(cfg, cfg.epochs_four), jobs=cfg.jobs, seed=cfg.seed + 1)
    cb = None if progress is None else (lambda fold, rec: progress("four", fold, rec))
    res4 = cross_validate("cnn-svm", four, plan4, cv4, pretrained=source, progress=cb)
    seconds["four"] = time.perf_counter() - t1
    seconds["total"] = time.perf_counter() - t0

    result = ProxyResult(cfg, res2, res4, seconds)
    if out_dir is not None:
        write_proxy(result, out_dir)
    return result


def write_proxy(result: ProxyResult, out_dir) -> Path:
    out = Path(out_dir)
    b, f = result.binary, result.four
    emit_report(b.summaries["cnn-mlp"], out / "binary" / "cnn-mlp", "cnn-mlp", traces=b.traces)
    emit_report(
        b.summaries["cnn-svm"], out / "binary" / "cnn-svm", "cnn-svm", best_params=b.best_params(), grid=b.grid
    )
    emit_report(
        f.summaries["cnn-svm"], out / "four" / "cnn-svm", "cnn-svm", best_params=f.best_params(), grid=f.grid,
        traces=f.traces,
    )
    checks = {name: {"pass": ok, "value": value} for name, (ok, value) in result.checks().items()}
    doc = {"config": asdict(result.config), "seconds": result.seconds, "checks": checks}
    (out / "proxy.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return out
