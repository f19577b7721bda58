"""Accuracy, confusion matrices and attention-trace export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .audio_io import AudioClip, DatasetManifest, SkipSample, TaskDataset, TaskSpec, load_examples, resolve_label
from .errors import ConfigError
from .model import AttentionTrace, argmax_lowest, forward, predict_features
from .training import Checkpoint, FeatureSet

LOG_FLOOR = -20.0


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class
    labels: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\predicted", *self.labels])
        for label, row in zip(self.labels, self.counts):
            w.writerow([label, *(int(c) for c in row)])
        return buf.getvalue()


@dataclass
class EvalReport:
    overall_accuracy: float
    per_class_accuracy: np.ndarray
    confusion: ConfusionMatrix
    n_samples: int

    @property
    def accuracy_fraction(self) -> Fraction:
        return Fraction(int(np.trace(self.confusion.counts)), self.n_samples)

    def to_dict(self) -> dict:
        per_class = {lb: (None if np.isnan(a) else float(a))
                     for lb, a in zip(self.confusion.labels, self.per_class_accuracy)}
        return {
            "overall_accuracy": self.overall_accuracy,
            "n_samples": self.n_samples,
            "n_correct": int(np.trace(self.confusion.counts)),
            "per_class_accuracy": per_class,
            "labels": list(self.confusion.labels),
            "confusion": self.confusion.counts.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def confusion_from_predictions(y_true, y_pred, labels) -> ConfusionMatrix:
    n = len(labels)
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts, tuple(labels))


def report_from_predictions(y_true, y_pred, labels) -> EvalReport:
    cm = confusion_from_predictions(y_true, y_pred, labels)
    n = cm.total
    correct = int(np.trace(cm.counts))
    support = cm.support
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(cm.counts) / np.maximum(support, 1), np.nan)
    return EvalReport(correct / n if n else 0.0, per_class, cm, n)


def _check_task(ck: Checkpoint, task: TaskSpec) -> None:
    if ck.model_config.n_classes != task.n_classes:
        raise ConfigError(
            f"checkpoint predicts {ck.model_config.n_classes} classes, task {task.name} has {task.n_classes}")
    if ck.labels and tuple(ck.labels) != task.target_labels:
        raise ConfigError(f"checkpoint labels {ck.labels} differ from task {task.name}")


def evaluate(ck: Checkpoint, examples, task: TaskSpec, batch_size: int = 64) -> EvalReport:
    """Infer-mode evaluation over (clip, class) pairs or a FeatureSet."""
    _check_task(ck, task)
    if not isinstance(examples, FeatureSet):
        examples = FeatureSet.from_clips(list(examples), ck.spec_config, ck.params.dtype)
    logits, _ = predict_features(ck.params, examples.features, batch_size)
    return report_from_predictions(examples.labels, argmax_lowest(logits), task.target_labels)


def evaluate_split(ck: Checkpoint, manifest: DatasetManifest, split: str, task: TaskSpec) -> EvalReport:
    if split == "all":
        items = []
        for path, word, _ in manifest.entries:
            try:
                items.append((path, resolve_label(word, task)))
            except SkipSample:
                continue
        return evaluate(ck, load_examples(manifest.root, items, ck.spec_config.raw_len), task)
    ds = TaskDataset(manifest, split, task, ck.spec_config.raw_len, ck.train_config.seed)
    return evaluate(ck, ds.load(0), task)


def top_confusions(report: EvalReport, k: int = 5) -> list[tuple[str, str, int]]:
    """Largest off-diagonal cells, count descending then (row, col) ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = report.confusion.counts
    labels = report.confusion.labels
    cells = [(-int(counts[i, j]), i, j) for i in range(len(labels)) for j in range(len(labels))
             if i != j and counts[i, j] > 0]
    cells.sort()
    return [(labels[i], labels[j], -c) for c, i, j in cells[:k]]


@dataclass
class AttentionExport:
    trace: AttentionTrace
    labels: tuple[str, ...]
    frame_hop_seconds: float

    @property
    def predicted_label(self) -> str:
        return self.labels[self.trace.predicted_class]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.trace.weights)) * self.frame_hop_seconds

    @property
    def log10_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.maximum(np.log10(self.trace.weights), LOG_FLOOR)

    def rows(self) -> list[tuple[int, float, float, float]]:
        return [(i, float(t), float(w), float(lw)) for i, (t, w, lw)
                in enumerate(zip(self.times, self.trace.weights, self.log10_weights))]

    def to_csv(self) -> str:
        probs = ",".join(f"{lb}:{p!r}" for lb, p in zip(self.labels, self.trace.probabilities.tolist()))
        lines = [f"# predicted={self.predicted_label}", f"# probabilities={probs}",
                 "frame,time_s,weight,log10_weight"]
        lines += [f"{i},{t!r},{w!r},{lw!r}" for i, t, w, lw in self.rows()]
        return "\n".join(lines) + "\n"


def export_attention(ck: Checkpoint, clip: AudioClip) -> AttentionExport:
    _, trace = forward(clip, ck.params, "infer", ck.spec_config)
    labels = ck.labels or tuple(str(i) for i in range(ck.model_config.n_classes))
    return AttentionExport(trace, tuple(labels), ck.spec_config.frame_hop_seconds)
