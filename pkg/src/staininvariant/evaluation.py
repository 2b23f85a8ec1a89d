"""Classification metrics, label remapping and the cross-domain experiment."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .consistency_trainer import StainAugmenter, TrainConfig, evaluate_predictions, train
from .errors import EmptyMatrix, LengthMismatch, UnmappedLabel
from .synthetic import SyntheticDomainSpec, render_synthetic

logger = logging.getLogger(__name__)

CANONICAL_CLASSES = (
    "adipose",
    "background",
    "debris",
    "lymphocytes",
    "normal colon mucosa",
    "stroma",
    "colorectal adenocarcinoma epithelium",
)

REPORT_HEADER = ("method", "training_dataset", "accuracy", "recall", "precision", "f1")


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def confusion(preds: Sequence[int], truths: Sequence[int], k: int) -> np.ndarray:
    """``cm[i, j]`` counts samples of true class ``i`` predicted as ``j``."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truths = np.asarray(truths, dtype=np.int64).ravel()
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truths)} labels")
    for name, arr in (("prediction", preds), ("label", truths)):
        if len(arr) and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} class index outside [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm


@dataclass(frozen=True)
class MetricsRow:
    method: str
    training_dataset: str
    accuracy: float
    recall: float
    precision: float
    f1: float

    def values(self) -> tuple[float, float, float, float]:
        return self.accuracy, self.recall, self.precision, self.f1

    def csv_fields(self) -> list[str]:
        return [self.method, self.training_dataset] + [f"{v:.3f}" for v in self.values()]


def per_class_scores(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-class precision, recall, F1 and support. Zero denominators give 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return precision, recall, f1, support


def metrics(cm: np.ndarray, averaging: str = "weighted") -> dict[str, float]:
    """Accuracy plus precision/recall/F1 averaged over classes.

    ``macro`` takes the unweighted mean over classes with non-zero support;
    ``weighted`` weights each class by its support (so recall equals
    accuracy).
    """
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise EmptyMatrix("confusion matrix is empty")
    precision, recall, f1, support = per_class_scores(cm)
    present = support > 0
    if averaging == "macro":
        w = present / present.sum()
    elif averaging == "weighted":
        w = support / total
    else:
        raise ValueError("averaging must be 'macro' or 'weighted'")
    return {
        "accuracy": float(np.trace(cm) / total),
        "recall": float(np.dot(w, recall)),
        "precision": float(np.dot(w, precision)),
        "f1": float(np.dot(w, f1)),
    }


def metrics_row(method: str, training_dataset: str, cm: np.ndarray,
                averaging: str = "weighted") -> MetricsRow:
    return MetricsRow(method, training_dataset, **metrics(cm, averaging))


def format_report(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for row in rows:
        writer.writerow(row.csv_fields())
    return buf.getvalue()


def mean_row(method: str, training_dataset: str, rows: Sequence[MetricsRow]) -> MetricsRow:
    vals = np.mean([r.values() for r in rows], axis=0)
    return MetricsRow(method, training_dataset, *(float(v) for v in vals))


# --------------------------------------------------------------------------
# Labels
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelMap:
    """Source label name -> canonical class name, plus labels to discard."""

    mapping: dict[str, str]
    drop: frozenset[str] = frozenset()
    name: str = ""
    classes: tuple[str, ...] = CANONICAL_CLASSES

    def __post_init__(self):
        bad = {v for v in self.mapping.values() if v not in self.classes}
        if bad:
            raise ValueError(f"mapping targets unknown canonical classes: {sorted(bad)}")
        overlap = set(self.mapping) & set(self.drop)
        if overlap:
            raise ValueError(f"labels both mapped and dropped: {sorted(overlap)}")

    def index(self, label: str) -> int | None:
        """Canonical index of ``label``, or None if it is dropped."""
        if label in self.drop:
            return None
        if label not in self.mapping:
            raise UnmappedLabel(label)
        return self.classes.index(self.mapping[label])

    @classmethod
    def identity(cls, classes: Sequence[str] = CANONICAL_CLASSES) -> "LabelMap":
        return cls({c: c for c in classes}, classes=tuple(classes))

    @classmethod
    def from_dict(cls, d: dict) -> "LabelMap":
        unknown = set(d) - {"name", "mapping", "drop", "classes"}
        if unknown:
            raise ValueError(f"unknown label map keys: {sorted(unknown)}")
        return cls(
            mapping=dict(d["mapping"]),
            drop=frozenset(d.get("drop", ())),
            name=d.get("name", ""),
            classes=tuple(d.get("classes", CANONICAL_CLASSES)),
        )

    def to_dict(self) -> dict:
        return {"name": self.name, "classes": list(self.classes),
                "mapping": self.mapping, "drop": sorted(self.drop)}

    @classmethod
    def load(cls, path: str | Path) -> "LabelMap":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def bundled(cls, name: str) -> "LabelMap":
        """Shipped grouping for ``"k19"`` or ``"k16"`` folder names."""
        text = resources.files("staininvariant.data").joinpath(f"labelmap_{name.lower()}.json")
        return cls.from_dict(json.loads(text.read_text()))


@dataclass
class RemapResult:
    items: list
    labels: np.ndarray
    counts: dict[str, int] = field(default_factory=dict)
    dropped: dict[str, int] = field(default_factory=dict)


def remap_labels(dataset: Sequence[tuple[object, str]], lmap: LabelMap) -> RemapResult:
    """Relabel ``(item, label_name)`` pairs to canonical indices.

    Samples whose label is on the drop list are removed. Every label must be
    either mapped or dropped.
    """
    items, labels = [], []
    counts: dict[str, int] = {}
    dropped: dict[str, int] = {}
    for item, label in dataset:
        idx = lmap.index(label)
        if idx is None:
            dropped[label] = dropped.get(label, 0) + 1
            continue
        items.append(item)
        labels.append(idx)
        name = lmap.classes[idx]
        counts[name] = counts.get(name, 0) + 1
    return RemapResult(items, np.array(labels, dtype=np.int64), counts, dropped)


# --------------------------------------------------------------------------
# Cross-domain experiment
# --------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    per_seed: list[tuple[int, MetricsRow]]
    mean_rows: list[MetricsRow]
    upper_bound: MetricsRow
    target_accuracy: dict[str, list[float]]

    def rows(self) -> list[MetricsRow]:
        return [self.upper_bound, *self.mean_rows]

    def to_csv(self) -> str:
        return format_report(self.rows())

    def per_seed_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("seed",) + REPORT_HEADER)
        for seed, row in self.per_seed:
            writer.writerow([seed] + row.csv_fields())
        return buf.getvalue()

    def consistency_wins(self) -> int:
        on, off = self.target_accuracy[ARM_ON], self.target_accuracy[ARM_OFF]
        return sum(a > b for a, b in zip(on, off))


UPPER_BOUND = "In-domain - Upper Bound"
ARM_OFF = "Without consistency - Lower Bound"
ARM_ON = "Consistency loss"


def run_crossdomain_experiment(
    source: SyntheticDomainSpec,
    target: SyntheticDomainSpec,
    cfg: TrainConfig,
    repeats: int = 5,
    averaging: str = "weighted",
) -> ExperimentReport:
    """Train with and without the consistency loss on ``source``, test on ``target``.

    Repeat ``i`` uses seed ``cfg.seed + i`` for both arms. The in-domain
    upper bound is a consistency-off model trained on a separate target-domain
    set (seed ``target.seed + 1000``) and tested on the same target set. Per-
    image stain matrices for augmentation are estimated once and shared.
    """
    if source.class_names != target.class_names:
        raise ValueError("source and target must share class prototypes")
    k = len(source.prototypes)
    src = render_synthetic(source)
    tgt = render_synthetic(target)
    tgt_train = render_synthetic(replace(target, seed=target.seed + 1000))
    augmenter = StainAugmenter(src.images, cfg.perturb)

    per_seed: list[tuple[int, MetricsRow]] = []
    accs: dict[str, list[float]] = {ARM_OFF: [], ARM_ON: [], UPPER_BOUND: []}
    rows: dict[str, list[MetricsRow]] = {ARM_OFF: [], ARM_ON: [], UPPER_BOUND: []}
    for i in range(repeats):
        seed = cfg.seed + i
        runs = [
            (ARM_OFF, "source", src, replace(cfg, seed=seed, use_consistency=False)),
            (ARM_ON, "source", src, replace(cfg, seed=seed, use_consistency=True)),
            (UPPER_BOUND, "target", tgt_train, replace(cfg, seed=seed, use_consistency=False)),
        ]
        for name, dataset_name, data, run_cfg in runs:
            result = train(data.images, data.labels, run_cfg, k,
                           augmenter if data is src else None)
            preds = evaluate_predictions(result.params, tgt.images)
            row = metrics_row(name, dataset_name, confusion(preds, tgt.labels, k), averaging)
            per_seed.append((seed, row))
            rows[name].append(row)
            accs[name].append(row.accuracy)
            logger.info("seed %d %s: target accuracy %.3f", seed, name, row.accuracy)

    mean_rows = [mean_row(ARM_OFF, "source", rows[ARM_OFF]),
                 mean_row(ARM_ON, "source", rows[ARM_ON])]
    upper = mean_row(UPPER_BOUND, "target", rows[UPPER_BOUND])
    return ExperimentReport(per_seed, mean_rows, upper, accs)
