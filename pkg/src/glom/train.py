"""Mini-batch Adam training with best-of-all-epochs checkpoint selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .checkpoint import ModelCheckpoint
from .data import LabeledImageSet
from .errors import DataError, NumericError, ParameterError
from .nn import Model
from .optim import AdamState, adam_step
from .tensor import no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-4
    decay: float = 1e-6
    seed: int = 0
    augment: bool = True
    l2: float = 1e-4  # penalty on conv/dense weights; 0 disables
    decay_mode: str = "lr"  # "lr": lr/(1+decay*t); "decoupled": weight shrinkage
    dtype: str = "float64"
    bn_recalibrate: int = 128  # training images used to re-estimate BN stats each epoch; 0 keeps running averages

    def __post_init__(self):
        for name in ("epochs", "batch_size", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.decay < 0 or self.l2 < 0:
            raise ParameterError("decay and l2 must be non-negative")
        if self.decay_mode not in ("lr", "decoupled"):
            raise ParameterError(f"unknown decay mode {self.decay_mode!r}")
        if self.bn_recalibrate < 0 or self.bn_recalibrate == 1:
            raise ParameterError("bn_recalibrate must be 0 or at least 2")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainingTrace:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def val_acc(self) -> np.ndarray:
        return np.array([r.val_acc for r in self.records])

    @property
    def train_loss(self) -> np.ndarray:
        return np.array([r.train_loss for r in self.records])

    def best_epoch(self) -> int:
        """Earliest epoch (1-based) with maximal validation accuracy."""
        return int(np.argmax(self.val_acc)) + 1

    @property
    def peak_val_acc(self) -> float:
        return float(self.val_acc.max())


def accuracy(model: Model, data: LabeledImageSet, batch_size: int = 64) -> float:
    probs, _ = model.predict_proba(data.images, batch_size)
    return float(np.mean(probs.argmax(axis=1) == data.labels))


def train(
    model: Model,
    train_set: LabeledImageSet,
    val_set: LabeledImageSet,
    config: TrainConfig,
    progress=None,
) -> tuple[TrainingTrace, ModelCheckpoint]:
    """Train ``model`` in place; return the per-epoch trace and the best checkpoint.

    The trace records the mean data loss over each epoch's mini-batches (the
    L2 penalty is applied to the gradients only).  ``progress``, when given,
    is called with each :class:`EpochRecord`.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation sets must be non-empty")
    k = model.spec.num_classes
    for name, ds in (("training", train_set), ("validation", val_set)):
        if ds.labels.max() >= k:
            raise DataError(f"{name} labels exceed the model's {k} classes")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    weights = set(model.weight_names()) if config.l2 else set()
    images = train_set.images.astype(model.dtype, copy=False)
    labels = train_set.labels
    n = len(train_set)
    trace = TrainingTrace()
    best_acc, best_ckpt = -1.0, None

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # batch-norm cannot normalize a single sample
            model.zero_grad()
            out = model.forward(images[idx], "train", rng)
            loss = model.loss(out, labels[idx])
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise NumericError(f"training diverged: loss {lval} at epoch {epoch}, batch starting {start}")
            loss.backward()
            grads = {}
            for pname, t in model.params.items():
                g = t.grad
                if pname in weights:
                    g = g + (2.0 * config.l2) * t.data
                grads[pname] = g
            adam_step(model.params, grads, state, config)
            loss_sum += lval * len(idx)
            correct += int(np.sum(out.probs.data.argmax(axis=1) == labels[idx]))
        if config.bn_recalibrate:
            pick = rng.choice(n, size=min(n, config.bn_recalibrate), replace=False)
            model.recalibrate_bn(images[np.sort(pick)])
        with no_grad():
            val_acc = accuracy(model, val_set)
        rec = EpochRecord(epoch, loss_sum / n, correct / n, val_acc)
        trace.records.append(rec)
        log.debug("epoch %d loss %.4f train %.3f val %.3f", epoch, rec.train_loss, rec.train_acc, val_acc)
        if progress is not None:
            progress(rec)
        if val_acc > best_acc:
            best_acc = val_acc
            best_ckpt = ModelCheckpoint.from_model(model, epoch=epoch, seed=config.seed, best_val_acc=val_acc)
    return trace, best_ckpt
