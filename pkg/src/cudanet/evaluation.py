"""Segmentation evaluation: confusion accumulation, per-class IoU, mean IoU."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import CLASS_NAMES
from .errors import DataError, ShapeError, UndefinedLossError
from .networks import NetworkState, encode_content, image_batch, segment
from .synth import IGNORE_ID, DatasetManifest, load_split


@dataclass
class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are prediction."""

    num_classes: int
    counts: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ShapeError(
                    f"confusion matrix must be {self.num_classes}x{self.num_classes}, "
                    f"got {self.counts.shape}"
                )

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """Add one (prediction, ground truth) pair; ignore-id pixels are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    n = cm.num_classes
    valid = gt != IGNORE_ID
    bad = valid & ((gt < 0) | (gt >= n) | (pred < 0) | (pred >= n))
    if bad.any():
        where = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DataError(
            f"class id out of range at pixel {where}: gt={int(gt[where])} "
            f"pred={int(pred[where])} with {n} classes"
        )
    idx = n * gt[valid].astype(np.int64) + pred[valid].astype(np.int64)
    cm.counts += np.bincount(idx, minlength=n * n).reshape(n, n)
    return cm


def miou(cm: ConfusionMatrix):
    """Per-class IoU and their mean; zero-denominator classes are excluded.

    Returns:
        (per_class, mean): per_class is a float array with NaN for classes
        absent from both prediction and ground truth.
    """
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - np.diag(counts)
    per_class = np.full(cm.num_classes, np.nan)
    present = denom > 0
    if not present.any():
        raise UndefinedLossError("mIoU undefined: confusion matrix has no evaluated pixels")
    per_class[present] = tp[present] / denom[present].astype(np.float64)
    return per_class, float(per_class[present].mean())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for [0, 1] images (higher is closer)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


@dataclass
class EvalReport:
    split: str
    per_class: dict
    miou: float
    pixel_count: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "per_class": dict(self.per_class),
            "miou": self.miou,
            "pixel_count": self.pixel_count,
            "meta": self.meta,
        }

    def save(self, path: Path) -> Path:
        from .config import canonical_json

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(canonical_json(self.to_dict()))
        return path


def predict_labels(state: NetworkState, images: np.ndarray) -> np.ndarray:
    """Argmax segmentation of a stack of images, batched, no gradients."""
    state.eval_mode()
    preds = []
    with torch.no_grad():
        for lo in range(0, images.shape[0], 16):
            x = image_batch(images[lo : lo + 16])
            h = segment(encode_content(x, state), state)
            preds.append(h.argmax(dim=1).numpy())
    return np.concatenate(preds, axis=0)


def evaluate(
    state: NetworkState,
    manifest: DatasetManifest,
    split: str,
    *,
    predict_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    meta: Optional[dict] = None,
) -> EvalReport:
    """Evaluate on one split. Hidden labels are permitted here, and only here."""
    data = load_split(manifest, split, allow_hidden=True)
    if data.labels is None:
        raise DataError(f"split '{split}' has no labels to evaluate against")
    preds = predict_fn(data.images) if predict_fn else predict_labels(state, data.images)
    preds = np.asarray(preds)
    if preds.shape != data.labels.shape:
        raise ShapeError(
            f"predictions shape {preds.shape} != labels shape {data.labels.shape}"
        )
    cm = ConfusionMatrix(state.num_classes)
    for i in range(preds.shape[0]):
        accumulate(cm, preds[i], data.labels[i])
    per_class, mean = miou(cm)
    names = CLASS_NAMES[: state.num_classes]
    per_class_named = {
        names[i]: float(per_class[i])
        for i in range(state.num_classes)
        if not np.isnan(per_class[i])
    }
    return EvalReport(
        split=split,
        per_class=per_class_named,
        miou=mean,
        pixel_count=cm.total(),
        meta=meta or {},
    )
