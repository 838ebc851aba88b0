"""Classification and segmentation evaluation from exact confusion counts.

All metrics derive from an integer confusion matrix, so sharded evaluation
can merge partial matrices by summation and reproduce single-pass numbers
exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ImageDataset, epoch_batches, to_tensor


@dataclass
class ConfusionMatrix:
    """counts[i][j] = samples (or pixels) of true class i predicted as class j."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class SegMetrics:
    per_class_iou: list  # NaN marks classes absent from both truth and prediction
    miou: float
    fwiou: float
    pixel_acc: float

    def to_dict(self, accuracy: float | None = None, confusion: ConfusionMatrix | None = None
                ) -> dict:
        out = {
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "miou": self.miou,
            "fwiou": self.fwiou,
            "pixel_acc": self.pixel_acc,
        }
        if accuracy is not None:
            out["accuracy"] = accuracy
        if confusion is not None:
            out["confusion"] = confusion.counts.tolist()
        return out


def confusion(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> ConfusionMatrix:
    """Exact per-class counts from predicted and true labels (any shape)."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        raise ValueError("cannot build a confusion matrix from empty labels")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} labels must lie in [0, {num_classes})")
    counts = np.bincount(
        num_classes * truth.astype(np.int64) + pred.astype(np.int64),
        minlength=num_classes**2,
    ).reshape(num_classes, num_classes)
    return ConfusionMatrix(counts)


def seg_metrics(cm: ConfusionMatrix) -> SegMetrics:
    """Per-class IoU, mean IoU over defined classes, frequency-weighted IoU, pixel accuracy.

    IoU_i = n_ii / (t_i + sum_j n_ji - n_ii). Classes absent from both truth
    and prediction are undefined (NaN) and excluded from the mean. fwIoU
    weights each defined class by its truth frequency t_i / sum_k t_k.
    """
    counts = cm.counts
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(counts).astype(np.float64)
    truth_totals = counts.sum(axis=1).astype(np.float64)  # t_i
    pred_totals = counts.sum(axis=0).astype(np.float64)
    union = truth_totals + pred_totals - diag
    defined = union > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[defined] = diag[defined] / union[defined]
    miou = float(np.mean(iou[defined]))
    freq = truth_totals / total
    fwiou = float(np.sum(freq[defined] * iou[defined]))
    pixel_acc = float(diag.sum() / total)
    return SegMetrics(per_class_iou=list(iou), miou=miou, fwiou=fwiou, pixel_acc=pixel_acc)


def classify_accuracy(model, dataset: ImageDataset, batch_size: int = 256
                      ) -> tuple[float, ConfusionMatrix]:
    """Deterministic full-split accuracy of a task net, with its confusion matrix."""
    num_classes = dataset.descriptor.num_classes
    model_classes = model.spec.options.get("num_classes")
    if model_classes is not None and model_classes != num_classes:
        raise ValueError(
            f"model predicts {model_classes} classes but dataset has {num_classes}"
        )
    preds = []
    batch_size = min(batch_size, len(dataset))
    with torch.no_grad():
        for i in range(0, len(dataset), batch_size):
            images = to_tensor(dataset.images[i : i + batch_size])
            logits = model(images, train=False)
            preds.append(logits.argmax(dim=1).numpy())
    cm = confusion(np.concatenate(preds), dataset.labels, num_classes)
    return cm.accuracy(), cm


def write_metrics(path, *, accuracy: float | None = None, cm: ConfusionMatrix | None = None
                  ) -> dict:
    """Emit the metrics.json schema: accuracy?, per-class IoU, mIoU, fwIoU, pixel acc."""
    if cm is None:
        raise ValueError("metrics require a confusion matrix")
    metrics = seg_metrics(cm)
    payload = metrics.to_dict(accuracy=accuracy, confusion=cm)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return payload
