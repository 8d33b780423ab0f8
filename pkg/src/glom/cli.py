"""``glom`` command line: synth, train, features, svm-fit, svm-grid, cv, tsne, report."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import GlomError

log = logging.getLogger("glom")

STOCHASTIC = {"synth", "train", "svm-grid", "cv", "tsne"}


# -- parser --------------------------------------------------------------------------
def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="JSON file of option defaults (flags take precedence)")
    p.add_argument("--out", help=out_help)
    p.add_argument("--seed", type=int, help="random seed (required for stochastic commands)")
    p.add_argument("--jobs", type=int, default=1, help="maximum concurrent fold/grid jobs")
    p.add_argument("-v", "--verbose", action="store_true")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset root with one sub-directory per class")
    p.add_argument("--arch", type=int, default=4, choices=(1, 2, 3, 4))
    p.add_argument("--size", type=int, default=None, help="input side length (default: native image size)")
    p.add_argument("--k", type=int, default=None, help="number of folds")
    p.add_argument("--split", default=None, help="train/validation split: 90/10, 80/20, 67/33 or 50/50")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--decay", type=float, default=1e-6)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    p.add_argument("--bn-recalibrate", type=int, default=128)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--pretrained", help="checkpoint to transfer from (output layer re-initialized)")


def _kernel_flags(p: argparse.ArgumentParser, multi: bool) -> None:
    if multi:
        p.add_argument("--kernel", default="all", help="linear, rbf, polynomial, sigmoid or all")
    else:
        p.add_argument("--kernel", default="linear", choices=("linear", "rbf", "polynomial", "sigmoid"))
    p.add_argument("--tol", type=float, default=1e-3)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glom", description="CNN feature extraction and kernel SVM workflows")
    ap.add_argument("--version", action="version", version=f"glom {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic image corpus")
    _common(p, "output dataset directory")
    p.add_argument("--classes", type=int, choices=(2, 4), default=2)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("train", help="train one network on one fold")
    _common(p, "output directory")
    _training_flags(p)
    p.add_argument("--fold", type=int, default=0, help="held-out fold index")

    p = sub.add_parser("features", help="extract backbone features to CSV")
    _common(p, "output CSV path")
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--data")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")

    p = sub.add_parser("svm-fit", help="fit a one-vs-all SVM on a feature CSV")
    _common(p, "output model path")
    p.add_argument("--features")
    _kernel_flags(p, multi=False)
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--degree", type=int, default=None)
    p.add_argument("--coef0", type=float, default=None)

    p = sub.add_parser("svm-grid", help="grid-search SVM kernels by K-fold accuracy")
    _common(p, "output JSON path")
    p.add_argument("--features")
    _kernel_flags(p, multi=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--split", default=None)

    p = sub.add_parser("cv", help="K-fold cross-validation of cnn-mlp / cnn-svm")
    _common(p, "output run directory")
    _training_flags(p)
    p.add_argument("--pipeline", choices=("cnn-mlp", "cnn-svm", "both"), default="both")
    _kernel_flags(p, multi=True)
    p.add_argument("--backbone", choices=("fold", "best"), default="fold")
    p.add_argument("--standardize", action="store_true", help="z-score features before the SVM")

    p = sub.add_parser("tsne", help="embed a feature CSV in 2-d")
    _common(p, "output directory")
    p.add_argument("--features")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--lr", type=float, default=200.0)

    p = sub.add_parser("report", help="tabulate report.json files")
    _common(p, "output text file")
    p.add_argument("reports", nargs="+", help="report.json files or directories containing them")
    return ap


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("config file must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        known = {a.dest for a in sub._actions}  # noqa: SLF001
        unknown = sorted(set(k.replace("-", "_") for k in overrides) - known)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    if args.command in STOCHASTIC and args.seed is None:
        parser.error(f"{args.command} needs --seed")
    if args.out is None:
        parser.error("--out is required")
    return args


# -- provenance --------------------------------------------------------------------------
class RunRecord:
    def __init__(self, args: argparse.Namespace, directory: Path):
        self.path = directory / "run.json"
        self.doc = {
            "command": args.command,
            "config": {k: v for k, v in vars(args).items() if k != "command"},
            "seed": args.seed,
            "version": __version__,
            "started": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "status": "running",
            "outputs": [],
        }
        self.write()

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=2, default=str) + "\n", encoding="utf-8")

    def finish(self, status: str, outputs=(), error: str | None = None) -> None:
        self.doc["status"] = status
        self.doc["finished"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
        self.doc["outputs"] = [str(o) for o in outputs]
        if error:
            self.doc["error"] = error
        self.write()


def _out_dir(args) -> Path:
    out = Path(args.out)
    return out.parent if args.command in ("features", "svm-fit", "svm-grid", "report") else out


# -- workflows ---------------------------------------------------------------------------
def _load(args):
    from .data import load_dataset
    from .errors import DataError

    if not args.data:
        raise DataError("--data is required")
    size = args.size
    if size is None:
        size = _native_size(Path(args.data))
    return load_dataset(args.data, size)


def _native_size(root: Path) -> int:
    from PIL import Image

    from .data import IMAGE_SUFFIXES
    from .errors import DataError

    for path in sorted(root.rglob("*")):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            with Image.open(path) as im:
                return int(im.size[0])
    raise DataError(f"no images under {root}")


def _k(args) -> int:
    from .data import split_to_k

    if args.split:
        return split_to_k(args.split)
    return args.k if args.k is not None else 10


def _train_config(args):
    from .train import TrainConfig

    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        decay=args.decay,
        seed=args.seed,
        augment=not args.no_augment,
        l2=args.l2,
        dtype=args.dtype,
        bn_recalibrate=args.bn_recalibrate,
    )


def cmd_synth(args) -> list[Path]:
    from .synth import BINARY_CLASSES, FOUR_CLASSES, SynthSpec, synth_generate

    classes = BINARY_CLASSES if args.classes == 2 else FOUR_CLASSES
    spec = SynthSpec(size=args.size, classes=classes, per_class=args.per_class, seed=args.seed)
    res = synth_generate(spec, args.out)
    print(f"wrote {len(res.data)} images in {len(classes)} classes to {args.out}")
    return [Path(args.out) / "manifest.csv"]


def cmd_train(args) -> list[Path]:
    from dataclasses import replace

    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import AugmentSpec, augment, kfold_split
    from .nn import adapt_head, architecture, build_architecture
    from .selection import check_no_leakage, pretrained_to_dtype, write_traces
    from .train import train

    data = _load(args)
    cfg = _train_config(args)
    plan = kfold_split(len(data), _k(args), seed=args.seed, labels=data.labels)
    tr, va = data.subset(plan.training(args.fold)), data.subset(plan.validation(args.fold))
    if cfg.augment:
        tr = augment(tr, AugmentSpec(seed=args.seed))
    check_no_leakage(tr, va)
    k = len(data.class_names)
    if args.pretrained:
        model = pretrained_to_dtype(adapt_head(load_checkpoint(args.pretrained), k, seed=args.seed), cfg.dtype)
    else:
        model = build_architecture(architecture(args.arch, k, data.images.shape[-1]), seed=args.seed, dtype=cfg.dtype)

    def progress(rec):
        log.info("epoch %d loss %.4f train %.3f val %.3f", rec.epoch, rec.train_loss, rec.train_acc, rec.val_acc)

    trace, best = train(model, tr, va, replace(cfg), progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    best.metadata.update(class_names=list(data.class_names), fold=args.fold)
    save_checkpoint(best, out / "model.glom")
    write_traces([trace], out / "traces.csv")
    plan.save(out / "plan.json")
    print(f"best val acc {trace.peak_val_acc:.4f} at epoch {trace.best_epoch()}")
    return [out / "model.glom", out / "traces.csv", out / "plan.json"]


def cmd_features(args) -> list[Path]:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .errors import DataError
    from .features import FeatureMatrix, write_features
    from .nn import extract_features

    if not args.checkpoint or not args.data:
        raise DataError("--checkpoint and --data are required")
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data, ckpt.spec.input_shape[-1])
    feats = extract_features(ckpt.to_model(args.dtype), data.images).astype(np.float64)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_features(FeatureMatrix(data.ids, data.labels, feats, list(data.class_names)), args.out)
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {args.out}")
    return [Path(args.out)]


def _kernel_spec(args):
    from .svm import KernelSpec

    kind = args.kernel
    return KernelSpec(
        kind,
        gamma=args.gamma if kind != "linear" else None,
        degree=args.degree if kind == "polynomial" else None,
        coef0=args.coef0 if kind in ("polynomial", "sigmoid") else None,
    )


def cmd_svm_fit(args) -> list[Path]:
    from .errors import DataError
    from .features import read_features
    from .svm import ova_fit, save_svm

    if not args.features:
        raise DataError("--features is required")
    fm = read_features(args.features, dim=None)
    model = ova_fit(fm.features, fm.labels, _kernel_spec(args), args.C, args.tol, class_names=fm.class_names)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_svm(model, args.out)
    acc = float(np.mean(model.predict(fm.features) == fm.labels))
    print(f"training accuracy {acc:.4f} with {sum(m.n_support for m in model.machines)} support vectors")
    return [Path(args.out)]


def _kinds(spec: str) -> list[str]:
    from .errors import ParameterError
    from .svm import KERNELS

    kinds = list(KERNELS) if spec == "all" else [k.strip() for k in spec.split(",")]
    bad = [k for k in kinds if k not in KERNELS]
    if bad:
        raise ParameterError(f"unknown kernel(s) {bad}")
    return kinds


def cmd_svm_grid(args) -> list[Path]:
    from .data import kfold_split
    from .errors import DataError
    from .features import read_features
    from .selection import GridResult, GridSpec, grid_search

    if not args.features:
        raise DataError("--features is required")
    fm = read_features(args.features, dim=None)
    plan = kfold_split(len(fm), _k(args), seed=args.seed, labels=fm.labels)
    cells = []
    for kind in _kinds(args.kernel):
        cells.extend(grid_search(fm.features, fm.labels, GridSpec(kind), plan, args.tol, args.jobs).cells)
    result = GridResult(cells)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    doc = {"K": plan.k, "seed": args.seed, **result.to_dict()}
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    for cell in result.best_per_kernel().values():
        print(cell.row())
    return [Path(args.out)]


def cmd_cv(args) -> list[Path]:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import AugmentSpec, kfold_split
    from .selection import CVConfig, cross_validate, emit_report

    data = _load(args)
    plan = kfold_split(len(data), _k(args), seed=args.seed, labels=data.labels)
    pipelines = ("cnn-mlp", "cnn-svm") if args.pipeline == "both" else (args.pipeline,)
    config = CVConfig(
        arch=args.arch,
        train=_train_config(args),
        augment=None if args.no_augment else AugmentSpec(),
        kernels=tuple(_kinds(args.kernel)),
        tol=args.tol,
        standardize=args.standardize,
        backbone=args.backbone,
        jobs=args.jobs,
        seed=args.seed,
    )
    pretrained = load_checkpoint(args.pretrained) if args.pretrained else None

    def progress(fold, rec):
        log.info("fold %d epoch %d loss %.4f val %.3f", fold, rec.epoch, rec.train_loss, rec.val_acc)

    result = cross_validate(pipelines, data, plan, config, pretrained=pretrained, progress=progress)
    out = Path(args.out)
    outputs = []
    for pipe in pipelines:
        dest = out if len(pipelines) == 1 else out / pipe
        paths = emit_report(
            result.summaries[pipe],
            dest,
            pipe,
            best_params=result.best_params() if pipe == "cnn-svm" else None,
            traces=result.traces,
            grid=result.grid if pipe == "cnn-svm" else None,
        )
        outputs += list(paths.values())
        print((dest / "report.txt").read_text(encoding="utf-8"), end="")
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    for j, ck in enumerate(result.checkpoints):
        ck.metadata.update(class_names=list(data.class_names), fold=j)
        save_checkpoint(ck, ckdir / f"fold{j}.glom")
    plan.save(out / "plan.json")
    return outputs + [out / "plan.json"]


def cmd_tsne(args) -> list[Path]:
    from .errors import DataError
    from .features import read_features
    from .tsne import TsneConfig, emit_scatter, tsne

    if not args.features:
        raise DataError("--features is required")
    fm = read_features(args.features, dim=None)
    cfg = TsneConfig(perplexity=args.perplexity, iterations=args.iterations, learning_rate=args.lr, seed=args.seed)
    emb, _ = tsne(fm.features, cfg)
    paths = emit_scatter(emb, fm.labels, args.out, ids=fm.ids, class_names=fm.class_names)
    print(f"KL {emb.kl_initial:.4f} -> {emb.kl:.4f}")
    return list(paths.values())


def cmd_report(args) -> list[Path]:
    from .selection import load_report, render_table

    rows, pipes = [], set()
    for item in args.reports:
        path = Path(item)
        files = sorted(path.rglob("report.json")) if path.is_dir() else [path]
        for f in files:
            summary, doc = load_report(f)
            rows.append((doc["split"], summary))
            pipes.add(doc["pipeline"])
    text = render_table(rows, title=", ".join(sorted(pipes)))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return [Path(args.out)]


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "features": cmd_features,
    "svm-fit": cmd_svm_fit,
    "svm-grid": cmd_svm_grid,
    "cv": cmd_cv,
    "tsne": cmd_tsne,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # argparse usage errors, --help, --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    record = RunRecord(args, _out_dir(args))
    try:
        outputs = COMMANDS[args.command](args)
    except (GlomError, OSError, ValueError) as exc:
        record.finish("failed", error=f"{type(exc).__name__}: {exc}")
        print(f"glom: error: {exc}", file=sys.stderr)
        return 1
    record.finish("ok", outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
