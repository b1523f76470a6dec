"""Dataset splitting and balancing, the training loop, and evaluation metrics."""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import ClassTooSmall, DegenerateLabels, LabelOutOfRange, ShapeMismatch
from .models import Module, build_model, canonical_name
from .pointcloud import PointCloud, apply_scale, center, normalize_unit, rescale_global, resample_fixed
from .raster import ProjectionSet, project6, stack_channels

log = logging.getLogger(__name__)

# Published (AUC, accuracy, training time) on proprietary data; shown for reference, never reproduced.
REFERENCE_RESULTS = {
    "baseline": ("Baseline", 0.75, 0.68, "~90 mins"),
    "baselinepp": ("Baseline++", 0.75, 0.70, "~90 mins"),
    "pctrees": ("PCTreeS", 0.81, 0.72, "~45 mins"),
}


@dataclass
class Item:
    id: str
    data: object
    label: int


@dataclass
class LabeledDataset:
    items: list[Item]
    class_names: list[str]

    def __post_init__(self):
        k = len(self.class_names)
        ids = set()
        for it in self.items:
            if not 0 <= it.label < k:
                raise LabelOutOfRange(f"item {it.id!r} has label {it.label} outside [0, {k})")
            if it.id in ids:
                raise ShapeMismatch(f"duplicate item id {it.id!r}")
            ids.add(it.id)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = defaultdict(int)
        for it in self.items:
            counts[it.label] += 1
        return dict(counts)

    def subset(self, items: Sequence[Item]) -> "LabeledDataset":
        return LabeledDataset(list(items), list(self.class_names))

    def map(self, fn: Callable[[object], object]) -> "LabeledDataset":
        return self.subset([Item(it.id, fn(it.data), it.label) for it in self.items])


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    lr: float = 1e-5
    seed: int = 0
    split_fraction: float = 0.8
    model: str = "pctrees"
    optimizer: str = "adam"
    tiny: bool = False
    input_points: int | None = None
    fusion: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.model = canonical_name(self.model)


@dataclass
class EvalReport:
    epoch: int
    loss: float
    overall_accuracy: float
    per_class_accuracy: list[float]
    auc_macro_ovr: float
    confusion: np.ndarray
    wall_time: float
    epoch_seconds: float = 0.0
    reference: dict = field(default_factory=dict)


# ---------------------------------------------------------------- splitting and balancing

def _by_class(ds: LabeledDataset) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = defaultdict(list)
    for i, it in enumerate(ds.items):
        groups[it.label].append(i)
    return groups


def stratified_split(ds: LabeledDataset, fraction: float = 0.8, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Per-class shuffled split; floor(fraction * count) of each class goes to train."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label, idx in sorted(_by_class(ds).items()):
        if len(idx) < 2:
            raise ClassTooSmall(f"class {ds.class_names[label]!r} has {len(idx)} item(s); need 2")
        perm = rng.permutation(idx)
        n_train = math.floor(fraction * len(idx))
        train_idx.extend(perm[:n_train].tolist())
        test_idx.extend(perm[n_train:].tolist())
    return (ds.subset([ds.items[i] for i in sorted(train_idx)]),
            ds.subset([ds.items[i] for i in sorted(test_idx)]))


def resample(ds: LabeledDataset, strategy: str = "none", seed: int = 0) -> LabeledDataset:
    """Balance classes by upsampling (with replacement) or downsampling (without)."""
    if strategy == "none":
        return ds.subset(list(ds.items))
    if strategy not in ("up", "down"):
        raise ValueError(f"unknown resample strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    groups = _by_class(ds)
    if not groups:
        return ds.subset([])
    items: list[Item] = []
    if strategy == "up":
        target = max(len(v) for v in groups.values())
        for label, idx in sorted(groups.items()):
            items.extend(ds.items[i] for i in idx)
            extra = rng.choice(idx, size=target - len(idx), replace=True) if target > len(idx) else []
            for n, i in enumerate(extra, start=1):
                src = ds.items[i]
                items.append(Item(f"{src.id}~{n}", src.data, src.label))
    else:
        target = min(len(v) for v in groups.values())
        for label, idx in sorted(groups.items()):
            keep = np.sort(rng.choice(idx, size=target, replace=False))
            items.extend(ds.items[i] for i in keep)
    return ds.subset(items)


# ---------------------------------------------------------------- preprocessing

def _centered(ds: LabeledDataset, n_points: int | None, seed: int) -> list[PointCloud]:
    clouds = []
    for i, it in enumerate(ds.items):
        c = it.data
        if n_points is not None:
            c = resample_fixed(c, n_points, [seed, i])
        clouds.append(center(c))
    return clouds


def _scaled(ds: LabeledDataset, clouds: list[PointCloud], scaling: str,
            scale: float | None) -> tuple[list[PointCloud], float | None]:
    if scaling == "unit":
        return [normalize_unit(c) for c in clouds], None
    if scaling != "global":
        raise ValueError(f"unknown scaling {scaling!r}; expected global or unit")
    if scale is None:
        return rescale_global(clouds)
    return apply_scale(clouds, scale), scale


def prepare_points(ds: LabeledDataset, n_points: int, seed: int = 0, scaling: str = "global",
                   scale: float | None = None) -> tuple[LabeledDataset, float | None]:
    """Fixed-size, centered, rescaled point arrays for the point transformer.

    Pass the ``scale`` fitted on the training set when preparing held-out data.
    """
    clouds, scale = _scaled(ds, _centered(ds, n_points, seed), scaling, scale)
    items = [Item(it.id, c.points.astype(np.float32), it.label) for it, c in zip(ds.items, clouds)]
    return ds.subset(items), scale


def prepare_rasters(ds: LabeledDataset, res: int = 128, extent: float = 2.0, mode: str = "density",
                    scaling: str = "global", scale: float | None = None) -> tuple[LabeledDataset, float | None]:
    """Six-view raster stacks for the CNN baselines.

    ``scaling="global"`` keeps relative tree height (baseline++); ``"unit"``
    normalizes every cloud on its own.
    """
    clouds, scale = _scaled(ds, _centered(ds, None, 0), scaling, scale)
    items = [Item(it.id, stack_channels(project6(c, res, extent, mode)), it.label)
             for it, c in zip(ds.items, clouds)]
    return ds.subset(items), scale


# ---------------------------------------------------------------- metrics

def auc_ovr(scores, labels, num_classes: int | None = None) -> float:
    """Macro one-vs-rest ROC AUC from the Mann-Whitney rank statistic.

    Tied scores receive midranks. Classes lacking positives or negatives are
    left out of the average.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"scores {scores.shape} vs labels {labels.shape}")
    k = num_classes or scores.shape[1]
    aucs = []
    for c in range(k):
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = len(labels) - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(scores[:, c])
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        aucs.append(u / (n_pos * n_neg))
    if not aucs:
        raise DegenerateLabels("no class has both positive and negative examples")
    return float(np.mean(aucs))


def confusion_and_accuracy(preds, labels, num_classes: int) -> tuple[np.ndarray, float, list[float]]:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ShapeMismatch(f"preds {preds.shape} vs labels {labels.shape}")
    for arr in (preds, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelOutOfRange(f"class index outside [0, {num_classes})")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    total = conf.sum()
    overall = float(np.trace(conf) / total) if total else float("nan")
    support = conf.sum(axis=1)
    per_class = [float(conf[i, i] / support[i]) if support[i] else float("nan") for i in range(num_classes)]
    return conf, overall, per_class


# ---------------------------------------------------------------- training

def as_model_input(data) -> np.ndarray:
    """Array a model consumes for one item: (n, 3) points or (6, res, res) rasters."""
    if isinstance(data, PointCloud):
        return data.points.astype(np.float32)
    if isinstance(data, ProjectionSet):
        return stack_channels(data).astype(np.float32)
    return np.asarray(data, dtype=np.float32)


def _stack(ds: LabeledDataset) -> np.ndarray:
    arrays = [as_model_input(it.data) for it in ds.items]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeMismatch(f"items have differing shapes {sorted(shapes)[:3]}; resample or project first")
    return np.stack(arrays)


def predict_proba(model: Module, inputs: np.ndarray, batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(inputs), batch_size):
            logits = model(inputs[i:i + batch_size])
            out.append(T.softmax(logits, dim=-1).data)
    return np.concatenate(out) if out else np.zeros((0, 0), dtype=np.float32)


def evaluate(model: Module, inputs: np.ndarray, labels: np.ndarray, num_classes: int,
             batch_size: int = 32) -> tuple[float, list[float], float, np.ndarray, np.ndarray]:
    probs = predict_proba(model, inputs, batch_size)
    preds = probs.argmax(axis=1)
    conf, overall, per_class = confusion_and_accuracy(preds, labels, num_classes)
    try:
        auc = auc_ovr(probs, labels, num_classes)
    except DegenerateLabels:
        auc = float("nan")
    return overall, per_class, auc, conf, probs


def _reference(model: str) -> dict:
    name, auc, acc, minutes = REFERENCE_RESULTS[model]
    return {"model": name, "auc": auc, "accuracy": acc, "training_time": minutes}


def train_model(config: TrainConfig, train_ds: LabeledDataset, test_ds: LabeledDataset,
                model: Module | None = None,
                on_epoch: Callable[[EvalReport], None] | None = None) -> tuple[Module, list[EvalReport]]:
    """Seeded mini-batch training with per-epoch test evaluation.

    Returns the trained model and one report per epoch, preceded by an
    epoch-0 report of the untrained model. The last report is the result.
    """
    if len(train_ds) == 0 or len(test_ds) == 0:
        raise ShapeMismatch("training and test sets must be nonempty")
    k = len(train_ds.class_names)
    x_train, y_train = _stack(train_ds), train_ds.labels
    x_test, y_test = _stack(test_ds), test_ds.labels
    if model is None:
        model = build_model(config.model, k, seed=config.seed, tiny=config.tiny,
                            input_points=config.input_points or (x_train.shape[1] if config.model == "pctrees" else None),
                            fusion=config.fusion)
    params = model.parameters()
    opt = T.Adam(params, lr=config.lr) if config.optimizer == "adam" else T.SGD(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    ref = _reference(config.model)

    overall, per_class, auc, conf, _ = evaluate(model, x_test, y_test, k, config.batch_size)
    reports = [EvalReport(0, float("nan"), overall, per_class, auc, conf, 0.0, 0.0, ref)]
    if on_epoch:
        on_epoch(reports[0])

    elapsed = 0.0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(x_train))
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            opt.zero_grad()
            loss = T.cross_entropy(model(x_train[idx]), y_train[idx])
            loss.backward()
            opt.step()
            losses.append(float(loss.data) * len(idx))
        seconds = time.perf_counter() - t0
        elapsed += seconds
        overall, per_class, auc, conf, _ = evaluate(model, x_test, y_test, k, config.batch_size)
        report = EvalReport(epoch, sum(losses) / len(order), overall, per_class, auc, conf,
                            elapsed, seconds, ref)
        reports.append(report)
        log.info("epoch %d loss %.4f acc %.3f auc %.3f (%.1fs)", epoch, report.loss, overall, auc, seconds)
        if on_epoch:
            on_epoch(report)
    return model, reports


# ---------------------------------------------------------------- reporting

METRICS_HEADER = ["epoch", "loss", "overall_accuracy", "auc_macro_ovr"]
TIMING_HEADER = ["epoch", "seconds"]


def write_metrics_csv(reports: Sequence[EvalReport], path) -> None:
    """Per-epoch metrics, free of wall-clock values so reruns are byte-identical.

    The epoch-0 evaluation of the untrained model is not a training epoch and
    is skipped.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in reports:
            if r.epoch == 0:
                continue
            w.writerow([r.epoch, f"{r.loss:.8f}", f"{r.overall_accuracy:.8f}", f"{r.auc_macro_ovr:.8f}"])


def write_timing_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_HEADER)
        for r in reports:
            if r.epoch:
                w.writerow([r.epoch, f"{r.epoch_seconds:.3f}"])


def read_metrics_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_report(results: dict[str, EvalReport], class_names: Sequence[str] | None = None,
                  notes: Sequence[str] = ()) -> str:
    """Plain-text results table with the published values alongside as references.

    ``results`` maps canonical model names to their last-epoch report.
    """
    def fmt(v):
        return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"

    header = f"{'Model':<12}{'AUC':>7}{'Accuracy':>10}{'Training Time':>15}   " \
             f"{'AUC':>5}{'Accuracy':>10}{'Training Time':>15}  [reference, not reproducible]"
    lines = [header, "-" * len(header)]
    for key, (label, ref_auc, ref_acc, ref_time) in REFERENCE_RESULTS.items():
        r = results.get(key)
        auc = r.auc_macro_ovr if r else None
        acc = r.overall_accuracy if r else None
        secs = f"{r.wall_time / 60:.1f} mins" if r and not math.isnan(r.wall_time) else "-"
        lines.append(f"{label:<12}{fmt(auc):>7}{fmt(acc):>10}{secs:>15}   "
                     f"{ref_auc:>5.2f}{ref_acc:>10.2f}{ref_time:>15}  [reference]")
    for key, r in results.items():
        lines.append("")
        lines.append(f"{REFERENCE_RESULTS[key][0]} per-class accuracy (last epoch {r.epoch}):")
        names = class_names or [str(i) for i in range(len(r.per_class_accuracy))]
        for name, acc in zip(names, r.per_class_accuracy):
            lines.append(f"  {name:<24}{fmt(acc)}")
        lines.append("  confusion (rows = truth, columns = prediction):")
        for row in r.confusion:
            lines.append("    " + " ".join(f"{v:5d}" for v in row))
    lines.append("")
    lines.append("AUC: macro one-vs-rest; metrics from the last epoch; split: stratified "
                 "(see run manifest for the fraction).")
    lines.extend(notes)
    return "\n".join(lines) + "\n"
