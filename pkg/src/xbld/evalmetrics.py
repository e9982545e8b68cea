"""Activation Precision / Activation Recall, threshold sweeps and accuracy.

Thresholds are percentiles ``t`` of the saliency values: a pixel is kept when
its value is >= the t-th percentile (linear interpolation between order
statistics). Higher ``t`` keeps a smaller area; ties at the cut are kept.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import EmptyMaskError, ShapeError

DEFAULT_THRESHOLDS = tuple(range(40, 100, 5))
CURVE_COLUMNS = ("method", "metric", "threshold", "value", "n_instances")


@dataclass
class ThresholdedMap:
    values: np.ndarray
    threshold: float
    source_id: str = ""


def _values(expl) -> np.ndarray:
    return np.asarray(getattr(expl, "values", expl), dtype=np.float64)


def percentile_threshold(expl, t: float, source_id: str = "") -> ThresholdedMap:
    if not 0 <= t < 100:
        raise ValueError(f"threshold must be in [0, 100), got {t}")
    vals = _values(expl)
    cut = np.percentile(vals, t)
    return ThresholdedMap((vals >= cut).astype(np.uint8), t, source_id)


def _kept_and_hits(expl, obj_mask, t) -> tuple[int, int, int]:
    vals = _values(expl)
    obj = np.asarray(obj_mask) > 0
    if vals.shape != obj.shape:
        raise ShapeError(f"map {vals.shape} and mask {obj.shape} differ in shape")
    keep = percentile_threshold(vals, t).values.astype(bool)
    return int(keep.sum()), int((keep & obj).sum()), int(obj.sum())


def activation_precision(expl, obj_mask, t: float) -> float:
    """Share of kept saliency pixels that fall on the object."""
    kept, hits, _ = _kept_and_hits(expl, obj_mask, t)
    return hits / kept


def activation_recall(expl, obj_mask, t: float) -> float:
    """Share of object pixels covered by the kept saliency pixels."""
    _, hits, n_obj = _kept_and_hits(expl, obj_mask, t)
    if n_obj == 0:
        raise EmptyMaskError("activation recall is undefined for an empty object mask")
    return hits / n_obj


@dataclass
class MetricCurve:
    metric: str
    thresholds: list
    values: list
    n_instances: list
    method: str = ""

    def __post_init__(self):
        if len(self.thresholds) != len(self.values):
            raise ValueError("thresholds and values must have the same length")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")

    def at(self, t: float) -> float:
        return self.values[self.thresholds.index(t)]

    def rows(self) -> list[dict]:
        return [{"method": self.method, "metric": self.metric, "threshold": t, "value": v,
                 "n_instances": n} for t, v, n in zip(self.thresholds, self.values, self.n_instances)]


def sweep(expls: Sequence, obj_masks: Sequence, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
          method: str = "") -> tuple[MetricCurve, MetricCurve]:
    """Dataset-mean AR and AP curves over ``thresholds``.

    Instances with an empty object mask count toward AP but not AR.
    """
    if len(expls) != len(obj_masks):
        raise ValueError("expls and obj_masks must be aligned")
    thresholds = list(thresholds)
    ar_sum = np.zeros(len(thresholds))
    ap_sum = np.zeros(len(thresholds))
    n_ar = 0
    for expl, mask in zip(expls, obj_masks):
        has_obj = bool(np.any(np.asarray(mask)))
        n_ar += has_obj
        for j, t in enumerate(thresholds):
            ap_sum[j] += activation_precision(expl, mask, t)
            if has_obj:
                ar_sum[j] += activation_recall(expl, mask, t)
    n = len(expls)
    ar = (ar_sum / n_ar).tolist() if n_ar else [float("nan")] * len(thresholds)
    ap = (ap_sum / n).tolist() if n else [float("nan")] * len(thresholds)
    return (MetricCurve("AR", thresholds, ar, [n_ar] * len(thresholds), method),
            MetricCurve("AP", thresholds, ap, [n] * len(thresholds), method))


def accuracy(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Fraction of argmax predictions equal to ``labels``.

    ``model`` is a ModelHandle or any callable mapping a batch of images to
    logits or class scores.
    """
    if len(labels) == 0:
        raise ValueError("accuracy of an empty test set is undefined")
    from .modelzoo import ModelHandle, predict

    if isinstance(model, ModelHandle):
        preds = predict(model, images, batch_size)
    else:
        preds = np.concatenate([np.asarray(model(images[i:i + batch_size])).argmax(-1)
                                for i in range(0, len(images), batch_size)])
    return float((preds == np.asarray(labels)).mean())


@dataclass
class EvalReport:
    accuracy: float
    curves: list[MetricCurve]
    method: str = ""
    dataset: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.accuracy <= 1:
            raise ValueError("accuracy must lie in [0, 1]")

    def curve(self, metric: str) -> MetricCurve:
        return next(c for c in self.curves if c.metric == metric)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        d["curves"] = [MetricCurve(**c) for c in d["curves"]]
        return cls(**d)


def write_curves_csv(curves: Sequence[MetricCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for c in curves:
            writer.writerows(c.rows())


def explain_split(handle, images: np.ndarray, labels: np.ndarray,
                  batch_size: int = 128) -> np.ndarray:
    """Input-resolution Grad-CAMs (N x H x W) targeting the given labels."""
    from .explainer import grad_cam_tensor, upsample_tensor

    handle.model.eval()
    out = []
    size = handle.spec.input_shape[:2]
    for i in range(0, len(images), batch_size):
        x = handle.prepare(images[i:i + batch_size])
        y = torch.as_tensor(labels[i:i + batch_size], device=x.device)
        cams, _ = grad_cam_tensor(handle, x, y)
        out.append(upsample_tensor(cams.double(), size).cpu().numpy())
    return np.concatenate(out)


def evaluate_model(handle, split, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                   method: Optional[str] = None, dataset: str = "") -> EvalReport:
    """Accuracy and AR/AP curves of ``handle`` on a (clean) DecoySplit."""
    method = method or handle.provenance.get("method", "")
    acc = accuracy(handle, split.images, split.labels)
    maps = explain_split(handle, split.images, split.labels)
    ar, ap = sweep(list(maps), list(split.obj_masks), thresholds, method)
    excluded = int(len(split) - ar.n_instances[0])
    return EvalReport(acc, [ar, ap], method, dataset,
                      {"n_test": len(split), "ar_excluded_empty_masks": excluded,
                       **{k: v for k, v in handle.provenance.items() if k != "method"}})
