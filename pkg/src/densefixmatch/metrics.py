"""Confusion matrix, per-class IoU and mIoU."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import IGNORE
from .model import ParamSet, forward_logits


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Return ``cm`` plus counts (gt, pred) over every non-IGNORE gt pixel."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    k = cm.shape[0]
    valid = gt != IGNORE
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= k or p.max() >= k):
        raise ValueError(f"label value outside [0, {k})")
    return cm + np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def iou_per_class(cm: np.ndarray) -> list[Optional[float]]:
    """IoU per class; ``None`` where the class is absent from both gt and prediction."""
    tp = np.diag(cm)
    denom = cm.sum(axis=1) + cm.sum(axis=0) - tp
    return [None if d == 0 else float(t) / float(d) for t, d in zip(tp, denom)]


def miou(cm: np.ndarray, undefined_as_zero: bool = False) -> tuple[float, float]:
    """Mean and population std of the per-class IoUs.

    Classes absent from both ground truth and prediction are skipped, or
    counted as 0 when ``undefined_as_zero`` is set.
    """
    per_class = iou_per_class(cm)
    if all(v is None for v in per_class):
        raise ValueError("no class has a defined IoU")
    ious = [0.0 if v is None else v for v in per_class] if undefined_as_zero else [v for v in per_class if v is not None]
    mean = sum(ious) / len(ious)
    std = math.sqrt(sum((v - mean) ** 2 for v in ious) / len(ious))
    return mean, std


def predict_labels(params: ParamSet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    dtype = next(iter(params.arrays.values())).dtype
    for i in range(0, len(images), batch_size):
        logits = forward_logits(params, np.asarray(images[i:i + batch_size], dtype=dtype)).data
        out.append(np.argmax(logits, axis=1).astype(np.uint8))
    return np.concatenate(out)


def evaluate_model(params: ParamSet, eval_set: Sequence, batch_size: int = 32) -> dict:
    """Single full-resolution pass per image; argmax prediction; mIoU.

    ``eval_set`` is a sequence of samples with ``image`` and ``labels``.
    Argmax over logits equals argmax over the softmax output.
    """
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    k = params.spec.num_classes
    images = np.stack([s.image for s in eval_set])
    gts = np.stack([s.labels for s in eval_set])
    preds = predict_labels(params, images, batch_size)
    cm = accumulate(new_confusion(k), preds, gts)
    mean, std = miou(cm)
    total = cm.sum()
    return {
        "miou": mean,
        "miou_std": std,
        "per_class_iou": iou_per_class(cm),
        "pixel_percent": [100.0 * float(r) / float(total) if total else 0.0 for r in cm.sum(axis=1)],
        "confusion": cm.tolist(),
    }


def write_report(path, result: dict, **meta) -> None:
    payload = dict(meta)
    payload.update({k: result[k] for k in ("miou", "miou_std", "per_class_iou", "pixel_percent")})
    Path(path).write_text(json.dumps(payload, indent=2))
