"""Confusion matrices, per-class sensitivity and Table-2-style reports."""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import torch

from .data.manifest import CLASS_NAMES, COVID19, NORMAL, PNEUMONIA
from .errors import ArgumentError

REPORT_KEYS = ("model_id", "dataset_version", "timestamp", "sensitivity", "accuracy", "sample_counts")
# column order used by the comparison table
TABLE_ORDER = (COVID19, PNEUMONIA, NORMAL)


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ArgumentError(f"counts must be {k}x{k}, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ArgumentError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, true: Iterable[int], pred: Iterable[int]) -> ConfusionMatrix:
        t = np.asarray(list(true) if not isinstance(true, np.ndarray) else true, dtype=np.int64)
        p = np.asarray(list(pred) if not isinstance(pred, np.ndarray) else pred, dtype=np.int64)
        np.add.at(self.counts, (t, p), 1)
        return self

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if self.class_names != other.class_names:
            raise ArgumentError("cannot merge matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return self.class_names == other.class_names and np.array_equal(self.counts, other.counts)

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> ConfusionMatrix:
        return cls(np.array(d["counts"], dtype=np.int64), tuple(d["class_names"]))


def predict_labels(probabilities: torch.Tensor | np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    p = probabilities.detach().cpu().numpy() if isinstance(probabilities, torch.Tensor) else np.asarray(probabilities)
    return np.argmax(p, axis=1)


def evaluate(model: Callable[[torch.Tensor], torch.Tensor], batches: Iterable) -> ConfusionMatrix:
    """Accumulate argmax predictions of ``model`` over ``batches``.

    ``batches`` yields :class:`~accovidnet.data.LabeledBatch` objects or
    ``(images, labels)`` pairs; ``model`` maps images to class probabilities.
    """
    if isinstance(model, torch.nn.Module):
        model.eval()
    cm = ConfusionMatrix()
    seen = 0
    with torch.no_grad():
        for batch in batches:
            images, labels = (batch.images, batch.labels) if hasattr(batch, "images") else batch
            cm.update(np.asarray(labels, dtype=np.int64), predict_labels(model(images)))
            seen += len(labels)
    if seen == 0:
        raise ArgumentError("empty test set")
    return cm


@dataclass
class MetricsReport:
    """Per-class sensitivity and supplementary accuracy, in percent.

    A class with no test samples has sensitivity ``None``.
    """

    per_class_sensitivity: dict[str, float | None]
    overall_accuracy: float
    sample_counts: dict[str, int]
    model_id: str = ""
    dataset_version: str = ""
    timestamp: str = ""


def compute_sensitivity(
    cm: ConfusionMatrix,
    model_id: str = "",
    dataset_version: str = "",
    timestamp: str | None = None,
) -> MetricsReport:
    counts = cm.counts
    if counts.sum() == 0:
        raise ArgumentError("confusion matrix has no samples")
    rows = counts.sum(axis=1)
    sens = {
        name: (100.0 * counts[k, k] / rows[k] if rows[k] else None)
        for k, name in enumerate(cm.class_names)
    }
    return MetricsReport(
        per_class_sensitivity=sens,
        overall_accuracy=100.0 * np.trace(counts) / counts.sum(),
        sample_counts={name: int(rows[k]) for k, name in enumerate(cm.class_names)},
        model_id=model_id,
        dataset_version=dataset_version,
        timestamp=timestamp if timestamp is not None else datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def format_percent(value: float | None) -> str | None:
    """Two decimals, half-up; ``None`` stays ``None``."""
    if value is None:
        return None
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def emit_report(report: MetricsReport, format: str = "structured") -> str:
    if format == "structured":
        doc = {
            "model_id": report.model_id,
            "dataset_version": report.dataset_version,
            "timestamp": report.timestamp,
            "sensitivity": {k: format_percent(v) for k, v in report.per_class_sensitivity.items()},
            "accuracy": format_percent(report.overall_accuracy),
            "sample_counts": dict(report.sample_counts),
        }
        return json.dumps(doc, indent=2) + "\n"
    if format == "table":
        names = list(report.per_class_sensitivity)
        cols = [names[k] for k in TABLE_ORDER if k < len(names)]
        cols += [n for n in names if n not in cols]
        label = f"{report.model_id or 'model'} ({report.dataset_version})" if report.dataset_version else (report.model_id or "model")
        cells = [format_percent(report.per_class_sensitivity[c]) or "n/a" for c in cols]
        header = "| Model | " + " | ".join(cols) + " | Accuracy* |"
        rule = "|" + "---|" * (len(cols) + 2)
        row = f"| {label} | " + " | ".join(cells) + f" | {format_percent(report.overall_accuracy)} |"
        return "\n".join([header, rule, row, "* accuracy is supplementary; sensitivity is the headline metric"]) + "\n"
    raise ArgumentError(f"unknown report format {format!r}")


def parse_report(text: str) -> MetricsReport:
    doc = json.loads(text)
    missing = [k for k in REPORT_KEYS if k not in doc]
    if missing:
        raise ArgumentError(f"report is missing key {missing[0]!r}")
    return MetricsReport(
        per_class_sensitivity={k: (None if v is None else float(v)) for k, v in doc["sensitivity"].items()},
        overall_accuracy=float(doc["accuracy"]),
        sample_counts={k: int(v) for k, v in doc["sample_counts"].items()},
        model_id=doc["model_id"],
        dataset_version=doc["dataset_version"],
        timestamp=doc["timestamp"],
    )
