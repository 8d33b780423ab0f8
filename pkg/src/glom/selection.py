"""Metrics, kernel grid search, K-fold cross-validation and report emission."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import ModelCheckpoint
from .data import K_TO_SPLIT, AugmentSpec, FoldPlan, LabeledImageSet, augment
from .errors import DataError, ParameterError, PlanError
from .nn import adapt_head, architecture, build_architecture, extract_features
from .svm import KernelSpec, OvaModel, gram, ova_fit
from .train import TrainConfig, TrainingTrace, train

log = logging.getLogger(__name__)

METRICS = ("P", "R", "F1", "ACC")
PIPELINES = ("cnn-mlp", "cnn-svm")
KERNEL_TITLES = {"linear": "Linear", "rbf": "RBF", "polynomial": "Polynomial", "sigmoid": "Sigmoid"}


# -- metrics -------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # counts[true, predicted]
    class_names: tuple

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] != len(self.class_names):
            raise DataError(f"confusion matrix must be square over {len(self.class_names)} classes, got {c.shape}")
        if np.any(c < 0):
            raise DataError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @classmethod
    def from_labels(cls, true, pred, class_names) -> "ConfusionMatrix":
        k = len(class_names)
        true = np.asarray(true, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if true.shape != pred.shape:
            raise DataError("true and predicted labels differ in length")
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (true, pred), 1)
        return cls(counts, tuple(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricsReport:
    P: float
    R: float
    F1: float
    ACC: float
    mode: str
    undefined: tuple = ()  # metrics whose denominator was zero (reported as 0)

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def positive_class(class_names) -> int:
    """Index treated as positive in binary metrics: ``lesion`` if present, else the last class."""
    names = list(class_names)
    return names.index("lesion") if "lesion" in names else len(names) - 1


def compute_metrics(cm: ConfusionMatrix, mode: str = "auto", positive: int | None = None) -> MetricsReport:
    """Precision, recall, F1 and accuracy.

    ``mode="auto"`` picks binary for two classes and macro otherwise.
    """
    if cm.total == 0:
        raise DataError("cannot compute metrics of an empty confusion matrix")
    k = len(cm.class_names)
    if mode == "auto":
        mode = "binary" if k == 2 else "macro"
    c = cm.counts
    acc = float(np.trace(c) / cm.total)
    flags: list[str] = []
    if mode == "binary":
        if k != 2:
            raise ParameterError(f"binary metrics need 2 classes, got {k}")
        pos = positive_class(cm.class_names) if positive is None else positive
        tp = c[pos, pos]
        p = _ratio(tp, c[:, pos].sum(), "P", flags)
        r = _ratio(tp, c[pos, :].sum(), "R", flags)
    elif mode == "macro":
        ps, rs = [], []
        for j in range(k):
            ps.append(_ratio(c[j, j], c[:, j].sum(), f"P[{cm.class_names[j]}]", flags))
            rs.append(_ratio(c[j, j], c[j, :].sum(), f"R[{cm.class_names[j]}]", flags))
        p, r = float(np.mean(ps)), float(np.mean(rs))
    else:
        raise ParameterError(f"unknown averaging mode {mode!r}")
    p, r = float(p), float(r)
    return MetricsReport(p, r, _f1(p, r), acc, mode, tuple(flags))


@dataclass(eq=False)
class MetricsSummary:
    reports: list[MetricsReport]
    mean: dict = field(init=False)
    std: dict = field(init=False)

    def __post_init__(self):
        if not self.reports:
            raise DataError("a summary needs at least one fold report")
        self.mean, self.std = {}, {}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in self.reports])
            self.mean[m] = float(np.mean(vals))
            self.std[m] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    @property
    def k(self) -> int:
        return len(self.reports)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MetricsSummary)
            and [r.as_dict() for r in self.reports] == [r.as_dict() for r in other.reports]
            and self.mean == other.mean
            and self.std == other.std
        )


def format_cell(mean: float, std: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f} (±{std:.{digits}f})"


# -- grid search -----------------------------------------------------------------
C_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
GAMMA_GRID = (0.001, 0.01, 1.0, 1.5, 2.0)
DEGREE_GRID = (1, 2, 3, 4)


@dataclass(frozen=True)
class GridSpec:
    kind: str
    C: tuple = C_GRID
    gamma: tuple = GAMMA_GRID
    degree: tuple = DEGREE_GRID
    coef0: float = 0.0

    def __post_init__(self):
        KernelSpec(self.kind)  # validates the kind
        for name in ("C", "gamma", "degree"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ParameterError(f"grid list {name} is empty")
            object.__setattr__(self, name, vals)

    def kernels(self) -> list[KernelSpec]:
        if self.kind == "linear":
            return [KernelSpec("linear")]
        if self.kind == "rbf":
            return [KernelSpec("rbf", gamma=g) for g in self.gamma]
        if self.kind == "sigmoid":
            return [KernelSpec("sigmoid", gamma=g, coef0=self.coef0) for g in self.gamma]
        return [KernelSpec("polynomial", gamma=g, degree=d, coef0=self.coef0) for g in self.gamma for d in self.degree]

    def size(self) -> int:
        return len(self.kernels()) * len(self.C)


@dataclass
class FoldFeatures:
    """Train/validation features for one fold (possibly from that fold's own backbone)."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


@dataclass
class GridCell:
    kernel: KernelSpec
    C: float
    fold_acc: list[float]
    nonconverged: int = 0

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.fold_acc))

    @property
    def std_acc(self) -> float:
        return float(np.std(self.fold_acc, ddof=1)) if len(self.fold_acc) > 1 else 0.0

    def params(self) -> dict:
        out = {"C": self.C}
        if self.kernel.gamma is not None:
            out["gamma"] = self.kernel.gamma
        if self.kernel.degree is not None:
            out["degree"] = self.kernel.degree
        return out

    def sort_key(self):
        # best first: higher accuracy, then smaller C, gamma, degree
        return (-self.mean_acc, self.C, self.kernel.gamma or 0.0, self.kernel.degree or 0)

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.kind,
            "params": self.params(),
            "mean_acc": self.mean_acc,
            "std_acc": self.std_acc,
            "fold_acc": list(self.fold_acc),
            "nonconverged": self.nonconverged,
        }

    def row(self) -> str:
        """Table-style record, e.g. ``Linear, 'C': 1, 1.000``."""
        params = ", ".join(f"'{k}': {_num(v)}" for k, v in self.params().items())
        return f"{KERNEL_TITLES[self.kernel.kind]}, {params}, {self.mean_acc:.3f}"


def _num(v) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


@dataclass
class GridResult:
    cells: list[GridCell]

    @property
    def best(self) -> GridCell:
        return min(self.cells, key=GridCell.sort_key)

    def best_per_kernel(self) -> dict[str, GridCell]:
        out = {}
        for cell in sorted(self.cells, key=GridCell.sort_key):
            out.setdefault(cell.kernel.kind, cell)
        return out

    def to_dict(self) -> dict:
        return {"best": self.best.to_dict(), "cells": [c.to_dict() for c in self.cells]}


def _fit_predict(fold: FoldFeatures, kernel, C, tol, gram_train, gram_val):
    model = ova_fit(
        fold.train_x, fold.train_y, kernel, C, tol, gram_matrix=gram_train, tolerate_nonconvergence=True
    )
    scores = np.stack([gram_val[:, m.support_indices] @ (m.alphas * m.labels) + m.bias for m in model.machines], 1)
    pred = np.asarray(model.classes)[np.argmax(scores, axis=1)]
    nonconv = sum(m.violation >= tol for m in model.machines)
    return pred, nonconv


def grid_search_folds(folds: list[FoldFeatures], grid: GridSpec, tol: float = 1e-3, jobs: int = 1) -> GridResult:
    """Exhaustive grid over ``grid``; each cell scored by mean held-out accuracy across ``folds``.

    Gram matrices are computed once per (fold, kernel parameters) and shared by every C.
    """
    kernels = grid.kernels()
    if not folds:
        raise PlanError("grid search needs at least one fold")

    def run_kernel(kernel):
        accs = np.zeros((len(grid.C), len(folds)))
        nonconv = np.zeros(len(grid.C), dtype=int)
        for f, fold in enumerate(folds):
            ks = kernel.resolved(fold.train_x.shape[1])
            g_tr = gram(ks, fold.train_x, fold.train_x)
            g_va = gram(ks, fold.val_x, fold.train_x)
            for ci, C in enumerate(grid.C):
                pred, nc = _fit_predict(fold, ks, C, tol, g_tr, g_va)
                accs[ci, f] = float(np.mean(pred == fold.val_y))
                nonconv[ci] += nc
        return [GridCell(kernel, float(C), list(accs[ci]), int(nonconv[ci])) for ci, C in enumerate(grid.C)]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_kernel = list(pool.map(run_kernel, kernels))
    else:
        per_kernel = [run_kernel(k) for k in kernels]
    cells = [cell for group in per_kernel for cell in group]
    # deterministic order: C outer, then gamma, then degree
    cells.sort(key=lambda c: (c.C, c.kernel.gamma or 0.0, c.kernel.degree or 0))
    return GridResult(cells)


def grid_search(features, labels, grid: GridSpec, plan: FoldPlan, tol: float = 1e-3, jobs: int = 1) -> GridResult:
    """Grid search on one feature matrix using the train/validation folds of ``plan``."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if plan.n != len(X) or len(y) != len(X):
        raise PlanError(f"plan covers {plan.n} samples, features have {len(X)} rows and {len(y)} labels")
    folds = [
        FoldFeatures(X[plan.training(j)], y[plan.training(j)], X[plan.validation(j)], y[plan.validation(j)])
        for j in range(plan.k)
    ]
    return grid_search_folds(folds, grid, tol, jobs)


# -- model selection -------------------------------------------------------------
def select_best_model(traces: list[TrainingTrace], checkpoints: list[ModelCheckpoint]) -> tuple[int, ModelCheckpoint]:
    """(fold index, checkpoint) with globally maximal peak validation accuracy; ties go to the lower fold."""
    if not traces or len(traces) != len(checkpoints):
        raise DataError("need one trace per checkpoint and at least one candidate")
    peaks = [t.peak_val_acc for t in traces]
    best = int(np.argmax(peaks))
    return best, checkpoints[best]


# -- cross-validation --------------------------------------------------------------
@dataclass
class CVConfig:
    arch: int = 4
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentSpec | None = field(default_factory=AugmentSpec)
    kernels: tuple = ("linear", "rbf", "polynomial", "sigmoid")
    grid: dict = field(default_factory=dict)  # kind -> GridSpec override
    tol: float = 1e-3
    standardize: bool = False
    backbone: str = "fold"  # "fold": each fold's own best epoch; "best": globally best fold model
    jobs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in ("fold", "best"):
            raise ParameterError(f"backbone must be 'fold' or 'best', got {self.backbone!r}")

    def grid_for(self, kind: str) -> GridSpec:
        return self.grid.get(kind, GridSpec(kind))

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "train": self.train.to_dict(),
            "augment": None if self.augment is None else vars(self.augment),
            "kernels": list(self.kernels),
            "tol": self.tol,
            "standardize": self.standardize,
            "backbone": self.backbone,
            "jobs": self.jobs,
            "seed": self.seed,
        }


@dataclass
class CVResult:
    summaries: dict[str, MetricsSummary]
    traces: list[TrainingTrace]
    checkpoints: list[ModelCheckpoint]
    plan: FoldPlan
    class_names: list[str]
    grid: GridResult | None = None
    confusion: dict[str, list[ConfusionMatrix]] = field(default_factory=dict)
    fold_features: list[FoldFeatures] = field(default_factory=list)

    def best_params(self) -> dict | None:
        if self.grid is None:
            return None
        best = self.grid.best
        return {"kernel": best.kernel.kind, **best.params()}


def _fold_seeds(seed: int, fold: int) -> tuple[int, int, int]:
    s = np.random.SeedSequence([seed, fold]).generate_state(3)
    return int(s[0]), int(s[1]), int(s[2])


def check_no_leakage(train_set: LabeledImageSet, val_set: LabeledImageSet) -> None:
    shared = set(train_set.origins) & set(val_set.origins)
    if shared:
        raise PlanError(f"{len(shared)} validation samples also appear in training (e.g. {sorted(shared)[0]!r})")


def _standardizer(x: np.ndarray):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return lambda a: (a - mu) / sd


def cross_validate(
    pipeline,
    data: LabeledImageSet,
    plan: FoldPlan,
    config: CVConfig = CVConfig(),
    pretrained: ModelCheckpoint | None = None,
    progress=None,
) -> CVResult:
    """Train one CNN per fold and evaluate the requested pipeline(s) on its held-out fold.

    ``pipeline`` is ``"cnn-mlp"``, ``"cnn-svm"`` or a tuple of both; both then
    share the same per-fold networks.  With ``pretrained`` each fold starts from
    that checkpoint with a fresh output layer sized to ``data``'s classes.
    ``progress(fold, record)`` is forwarded each epoch.
    """
    pipelines = (pipeline,) if isinstance(pipeline, str) else tuple(pipeline)
    for p in pipelines:
        if p not in PIPELINES:
            raise ParameterError(f"unknown pipeline {p!r}; choose from {PIPELINES}")
    if plan.n != len(data):
        raise PlanError(f"fold plan covers {plan.n} samples but the dataset has {len(data)}")
    k_classes = len(data.class_names)
    size = data.images.shape[-1]
    spec = architecture(config.arch, k_classes, size)

    traces, ckpts, fold_sets = [], [], []
    for j in range(plan.k):
        init_seed, train_seed, aug_seed = _fold_seeds(config.seed, j)
        tr = data.subset(plan.training(j))
        va = data.subset(plan.validation(j))
        if config.augment is not None:
            tr = augment(tr, replace(config.augment, seed=aug_seed))
        check_no_leakage(tr, va)
        if pretrained is not None:
            model = adapt_head(pretrained, k_classes, seed=init_seed)
            model = pretrained_to_dtype(model, config.train.dtype)
        else:
            model = build_architecture(spec, seed=init_seed, dtype=config.train.dtype)
        cb = None if progress is None else (lambda rec, j=j: progress(j, rec))
        trace, best = train(model, tr, va, replace(config.train, seed=train_seed), progress=cb)
        log.info("fold %d: peak val acc %.4f at epoch %d", j, trace.peak_val_acc, trace.best_epoch())
        traces.append(trace)
        ckpts.append(best)
        fold_sets.append((tr, va))

    summaries, confusion = {}, {}
    if "cnn-mlp" in pipelines:
        cms = []
        for ck, (_, va) in zip(ckpts, fold_sets):
            probs, _ = ck.to_model(config.train.dtype).predict_proba(va.images)
            cms.append(ConfusionMatrix.from_labels(va.labels, probs.argmax(axis=1), data.class_names))
        confusion["cnn-mlp"] = cms
        summaries["cnn-mlp"] = MetricsSummary([compute_metrics(cm) for cm in cms])

    grid_result, feats = None, []
    if "cnn-svm" in pipelines:
        if config.backbone == "best":
            _, shared = select_best_model(traces, ckpts)
        for j, (tr, va) in enumerate(fold_sets):
            ck = shared if config.backbone == "best" else ckpts[j]
            model = ck.to_model(config.train.dtype)
            xtr = extract_features(model, tr.images).astype(np.float64)
            xva = extract_features(model, va.images).astype(np.float64)
            if config.standardize:
                f = _standardizer(xtr)
                xtr, xva = f(xtr), f(xva)
            feats.append(FoldFeatures(xtr, tr.labels, xva, va.labels))
        cells = []
        for kind in config.kernels:
            cells.extend(grid_search_folds(feats, config.grid_for(kind), config.tol, config.jobs).cells)
        grid_result = GridResult(cells)
        best = grid_result.best
        cms = []
        for fold in feats:
            ks = best.kernel.resolved(fold.train_x.shape[1])
            pred, _ = _fit_predict(
                fold, ks, best.C, config.tol, gram(ks, fold.train_x, fold.train_x), gram(ks, fold.val_x, fold.train_x)
            )
            cms.append(ConfusionMatrix.from_labels(fold.val_y, pred, data.class_names))
        confusion["cnn-svm"] = cms
        summaries["cnn-svm"] = MetricsSummary([compute_metrics(cm) for cm in cms])

    return CVResult(summaries, traces, ckpts, plan, list(data.class_names), grid_result, confusion, feats)


def pretrained_to_dtype(model, dtype):
    if model.dtype == np.dtype(dtype):
        return model
    return ModelCheckpoint.from_model(model).to_model(dtype)


# -- reporting ---------------------------------------------------------------------
def summary_to_dict(summary: MetricsSummary, split: str, pipeline: str, best_params=None) -> dict:
    out = {
        "split": split,
        "pipeline": pipeline,
        "K": summary.k,
        "per_fold": [{"fold": j, **r.as_dict()} for j, r in enumerate(summary.reports)],
        "mean": dict(summary.mean),
        "std": dict(summary.std),
    }
    modes = {r.mode for r in summary.reports}
    out["averaging"] = modes.pop() if len(modes) == 1 else sorted(modes)
    if best_params is not None:
        out["best_params"] = best_params
    return out


def summary_from_dict(d: dict) -> MetricsSummary:
    mode = d.get("averaging", "binary")
    reports = [MetricsReport(r["P"], r["R"], r["F1"], r["ACC"], mode) for r in d["per_fold"]]
    return MetricsSummary(reports)


def render_table(rows: list[tuple[str, MetricsSummary]], title: str = "") -> str:
    """Plain-text table: one line per split with mean (±std) for P, R, F1 and ACC."""
    head = ["Split", "μP", "μR", "μF1", "μACC"]
    body = [[split] + [format_cell(s.mean[m], s.std[m]) for m in METRICS] for split, s in rows]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    lines = ([title] if title else []) + [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def write_traces(traces: list[TrainingTrace], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "epoch", "train_loss", "train_acc", "val_acc"])
        for j, trace in enumerate(traces):
            for r in trace.records:
                w.writerow([j, r.epoch, repr(float(r.train_loss)), repr(float(r.train_acc)), repr(float(r.val_acc))])


def emit_report(
    summary: MetricsSummary,
    destination,
    pipeline: str,
    split: str | None = None,
    best_params: dict | None = None,
    traces: list[TrainingTrace] | None = None,
    grid: GridResult | None = None,
) -> dict[str, Path]:
    """Write ``report.json``, ``report.txt`` and (given traces) ``traces.csv`` under ``destination``."""
    out = Path(destination)
    out.mkdir(parents=True, exist_ok=True)
    split = split or K_TO_SPLIT.get(summary.k, f"K={summary.k}")
    doc = summary_to_dict(summary, split, pipeline, best_params)
    paths = {"json": out / "report.json", "table": out / "report.txt"}
    paths["json"].write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    text = render_table([(split, summary)], title=pipeline)
    if grid is not None:
        text += "\nbest per kernel\n" + "".join(c.row() + "\n" for c in grid.best_per_kernel().values())
    paths["table"].write_text(text, encoding="utf-8")
    if traces is not None:
        paths["traces"] = out / "traces.csv"
        write_traces(traces, paths["traces"])
    if grid is not None:
        paths["grid"] = out / "grid.json"
        paths["grid"].write_text(json.dumps(grid.to_dict(), indent=2) + "\n", encoding="utf-8")
    return paths


def load_report(path) -> tuple[MetricsSummary, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return summary_from_dict(doc), doc


def grid_size(kind: str) -> int:
    return GridSpec(kind).size()


def cartesian(grid: GridSpec):
    """Every (kernel, C) pair the grid visits, in evaluation order."""
    return list(itertools.product(grid.kernels(), grid.C))
