"""Training loops for the baseline, the teacher and the distilled student."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamConfig, Tensor
from .models import Model, build_model, forward_classify, forward_features
from .signal import LabeledDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    adam: AdamConfig = field(default_factory=AdamConfig)
    kd_weight: float = 1.0
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kd_weight < 0:
            raise ValueError("kd_weight must be non-negative")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    ce_loss: float
    kd_loss: float = 0.0  # weighted KD contribution, so train_loss = ce_loss + kd_loss
    kd_mse: float = 0.0   # unweighted feature MSE (diagnostic only)


METRICS_COLUMNS = ("epoch", "train_loss", "ce_loss", "kd_loss", "train_acc", "test_acc")


def metrics_to_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for m in history:
        w.writerow([m.epoch, repr(m.train_loss), repr(m.ce_loss), repr(m.kd_loss),
                    repr(m.train_accuracy), repr(m.test_accuracy)])
    return buf.getvalue()


def write_metrics_csv(history, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_to_csv(history))


class EmptyClassError(ValueError):
    pass


class VariantError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *range(self.counts.shape[1])])
        for i, row in enumerate(self.counts):
            w.writerow([i, *(int(v) for v in row)])
        return buf.getvalue()


def confusion_matrix(y_true, y_pred, num_classes) -> ConfusionMatrix:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return ConfusionMatrix(counts)


def model_inputs(model: Model, dataset: LabeledDataset):
    """Inputs and labels a model of this variant is trained/evaluated on."""
    if model.variant == "wide":
        if not dataset.windows:
            raise VariantError("wide (teacher) model needs temporal windows; the dataset has none")
        _, w, y = dataset.paired_arrays()
        return w, y
    if dataset.windows:
        x, _, y = dataset.paired_arrays()
        return x, y
    return dataset.segment_arrays()


def evaluate(model: Model, dataset: LabeledDataset, batch_size=256):
    """Accuracy and confusion matrix (rows = true label)."""
    x, y = model_inputs(model, dataset)
    if len(y) == 0:
        return 0.0, ConfusionMatrix(np.zeros((model.spec.num_classes,) * 2, np.int64))
    logits, _ = forward_classify(model, x, batch_size)
    cm = confusion_matrix(y, logits.argmax(axis=1), model.spec.num_classes)
    return cm.accuracy, cm


def _check_classes(y, num_classes):
    present = set(np.unique(y).tolist())
    if len(present) < 2:
        raise EmptyClassError(f"need at least 2 classes with samples, found {sorted(present)}")
    absent = [k for k in range(num_classes) if k not in present]
    if absent:
        raise EmptyClassError(f"classes with no training samples: {absent}")


def _batches(n, config: TrainConfig, rng):
    order = rng.permutation(n) if config.shuffle else np.arange(n)
    for i in range(0, n, config.batch_size):
        yield order[i:i + config.batch_size]


def _fit(model, x, y, test, config: TrainConfig, targets=None, callback=None):
    """Shared supervised loop.  ``targets`` are cached teacher latents."""
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    lam = config.kd_weight if targets is not None else 0.0
    history = []
    for epoch in range(1, config.epochs + 1):
        tot = ce_tot = kd_tot = mse_tot = 0.0
        correct = 0
        for idx in _batches(len(y), config, rng):
            xb = x[idx]
            yb = y[idx]
            z = model.features(xb)
            logits = model.classify_features(z)
            ce = ad.softmax_cross_entropy(logits, yb)
            loss = ce
            if targets is not None:
                kd = ad.mse(z, Tensor(targets[idx]))
                loss = ad.add(ce, ad.scale(kd, lam))
                mse_tot += float(kd.data) * len(idx)
                kd_tot += lam * float(kd.data) * len(idx)
            ad.backward(loss)
            ad.adam_step(params, config.adam)
            tot += float(loss.data) * len(idx)
            ce_tot += float(ce.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        n = len(y)
        if not np.isfinite(tot):
            raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        test_acc = evaluate(model, test)[0] if test is not None else float("nan")
        m = EpochMetrics(epoch, tot / n, correct / n, test_acc, ce_tot / n, kd_tot / n, mse_tot / n)
        history.append(m)
        log.info("epoch %d loss %.4f train_acc %.3f test_acc %.3f", epoch, m.train_loss,
                 m.train_accuracy, m.test_accuracy)
        if callback is not None:
            callback(m)
    return history


def train_baseline(train: LabeledDataset, test: LabeledDataset | None, config: TrainConfig = TrainConfig(),
                   callback=None):
    """Narrow model trained with plain cross-entropy on single segments."""
    model = build_model("narrow", train.num_classes, seed=config.seed)
    x, y = model_inputs(model, train)
    _check_classes(y, train.num_classes)
    history = _fit(model, x, y, test, config, callback=callback)
    model.provenance = {"role": "baseline", "epochs": config.epochs, "seed": config.seed,
                        "dataset": train.domain_tag}
    return model, history


def train_teacher(train: LabeledDataset, test: LabeledDataset | None, config: TrainConfig = TrainConfig(),
                  callback=None):
    """Wide model trained on five-segment windows labelled by their centre."""
    model = build_model("wide", train.num_classes, seed=config.seed)
    w, y = model_inputs(model, train)
    if test is not None and not test.windows:
        raise VariantError("the test split has no temporal windows (each test portion needs at least "
                           "5 segments); use longer recordings or a smaller train fraction")
    _check_classes(y, train.num_classes)
    history = _fit(model, w, y, test, config, callback=callback)
    model.provenance = {"role": "teacher", "epochs": config.epochs, "seed": config.seed,
                        "dataset": train.domain_tag}
    return model, history


def teacher_targets(teacher: Model, windows, batch_size=256):
    """Frozen-teacher latents for every window, computed once."""
    return forward_features(teacher, windows, batch_size)


def distill_student(train: LabeledDataset, test: LabeledDataset | None, teacher: Model,
                    config: TrainConfig = TrainConfig(), callback=None, student_spec=None):
    """Narrow student trained on CE + kd_weight * MSE(student latent, teacher latent).

    The teacher is never updated.  With ``kd_weight == 0`` the loop consumes
    exactly the same initialisation and batch stream as ``train_baseline``.
    """
    if teacher.variant != "wide":
        raise VariantError(f"teacher must be a wide model, got {teacher.variant}")
    student = build_model("narrow", train.num_classes, seed=config.seed, spec=student_spec)
    if student.latent_dim != teacher.latent_dim:
        raise VariantError(f"latent mismatch: student {student.latent_dim} vs teacher {teacher.latent_dim}")
    if not train.windows:
        raise VariantError("distillation needs temporal windows for the training segments")
    x, w, y = train.paired_arrays()
    excluded = len(train.segments) - len(y)
    if excluded:
        log.info("distillation: %d boundary segments without a window excluded", excluded)
    _check_classes(y, train.num_classes)
    targets = teacher_targets(teacher, w)
    history = _fit(student, x, y, test, config, targets=targets, callback=callback)
    student.provenance = {"role": "student", "epochs": config.epochs, "seed": config.seed,
                          "kd_weight": config.kd_weight, "dataset": train.domain_tag}
    return student, history


__all__ = [
    "ConfusionMatrix", "EmptyClassError", "EpochMetrics", "METRICS_COLUMNS", "TrainConfig",
    "VariantError", "confusion_matrix", "distill_student", "evaluate", "metrics_to_csv",
    "model_inputs", "teacher_targets", "train_baseline", "train_teacher", "write_metrics_csv",
]
