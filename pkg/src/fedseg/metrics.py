"""Box IoU, per-class mask IoU, pixel accuracy and the JSON-lines metric log."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, NamedTuple, Optional, Sequence

import numpy as np

MODES = ("centralized", "local", "federated")


class Box(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def area(self) -> float:
        return max(0.0, self.x_max - self.x_min) * max(0.0, self.y_max - self.y_min)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


def box_iou(a: Box, b: Box) -> float:
    """Overlap area over union area; 0.0 when the union is empty."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def _class_counts(pred: np.ndarray, truth: np.ndarray, num_classes: int):
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    inter = np.bincount(truth[pred == truth], minlength=num_classes)[:num_classes]
    area_p = np.bincount(pred, minlength=num_classes)[:num_classes]
    area_t = np.bincount(truth, minlength=num_classes)[:num_classes]
    return inter, area_p + area_t - inter


def mask_iou_per_class(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> list[Optional[float]]:
    """IoU per class; ``None`` for classes present in neither map."""
    if np.shape(pred) != np.shape(truth):
        raise ValueError("prediction and ground truth differ in shape")
    inter, union = _class_counts(pred, truth, num_classes)
    return [float(i) / float(u) if u else None for i, u in zip(inter, union)]


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and ground truth differ in shape")
    if pred.size == 0:
        return 0.0
    return float(np.count_nonzero(pred == truth)) / pred.size


def mean_iou(ious: Sequence[Optional[float]]) -> Optional[float]:
    """Macro average over present classes."""
    present = [v for v in ious if v is not None]
    return sum(present) / len(present) if present else None


def micro_iou(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> Optional[float]:
    """Summed intersections over summed unions across all classes."""
    inter, union = _class_counts(pred, truth, num_classes)
    total = int(union.sum())
    return float(inter.sum()) / total if total else None


@dataclass
class MetricRecord:
    run_id: str
    mode: str
    round: int
    epoch: int
    loss: float
    pixel_accuracy: float
    iou_per_class: list[tuple[str, Optional[float]]]
    mean_iou: Optional[float] = None
    micro_iou: Optional[float] = None
    timestamp: float = field(default_factory=time.time)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.round < 0 or self.epoch < 0:
            raise ValueError("round and epoch must be non-negative")
        if not 0.0 <= self.pixel_accuracy <= 1.0:
            raise ValueError("pixel_accuracy outside [0, 1]")
        self.iou_per_class = [(str(n), v) for n, v in self.iou_per_class]
        for name, v in self.iou_per_class:
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"IoU for {name} outside [0, 1]")

    def to_json(self) -> str:
        d = asdict(self)
        d["iou_per_class"] = [{"class": n, "iou": v} for n, v in self.iou_per_class]
        return json.dumps(d, allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> "MetricRecord":
        d = json.loads(line)
        d["iou_per_class"] = [(e["class"], e["iou"]) for e in d["iou_per_class"]]
        return cls(**d)


def evaluate_maps(pred: np.ndarray, truth: np.ndarray, class_names: Sequence[str], *, run_id: str,
                  mode: str, loss: float, round: int = 0, epoch: int = 0) -> MetricRecord:
    k = len(class_names)
    ious = mask_iou_per_class(pred, truth, k)
    return MetricRecord(
        run_id=run_id, mode=mode, round=round, epoch=epoch, loss=loss,
        pixel_accuracy=pixel_accuracy(pred, truth),
        iou_per_class=list(zip(class_names, ious)),
        mean_iou=mean_iou(ious),
        micro_iou=micro_iou(pred, truth, k),
    )


class MetricSink:
    """Append-only JSON-lines writer; whole lines only, flushed on every write."""

    def __init__(self, path: str | Path | None = None, stream: IO[str] | None = None):
        if (path is None) == (stream is None):
            raise ValueError("give exactly one of path or stream")
        self._lock = threading.Lock()
        self._owned = stream is None
        self._stream = stream if stream is not None else open(path, "a", encoding="utf-8")
        self.records: list[MetricRecord] = []

    def append(self, record: MetricRecord) -> None:
        line = record.to_json() + "\n"
        with self._lock:
            self._stream.write(line)
            self._stream.flush()
            self.records.append(record)

    def close(self) -> None:
        if self._owned:
            self._stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def append_metric(sink: MetricSink, record: MetricRecord) -> None:
    sink.append(record)


def read_metrics(path: str | Path) -> list[MetricRecord]:
    with open(path, encoding="utf-8") as fh:
        return [MetricRecord.from_json(line) for line in fh if line.strip()]
