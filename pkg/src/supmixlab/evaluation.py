"""Confusion matrices, IoU / mIoU, class-ratio statistics and seed aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import IGNORE_INDEX, Tensor


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, prediction: np.ndarray, truth: np.ndarray, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Return cm + counts, rows = truth, columns = prediction; ignored truth pixels skipped."""
    prediction = np.asarray(prediction)
    truth = np.asarray(truth)
    if prediction.shape != truth.shape:
        raise ValueError(f"prediction shape {prediction.shape} != truth shape {truth.shape}")
    n = cm.shape[0]
    valid = truth != ignore_index
    t = truth[valid].astype(np.int64)
    p = prediction[valid].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= n or p.min() < 0 or p.max() >= n):
        raise ValueError(f"class index outside [0, {n})")
    return cm + np.bincount(n * t + p, minlength=n * n).reshape(n, n)


def iou(cm: np.ndarray, c: int) -> float | None:
    """Intersection over union for class c; None when the class is absent from truth and prediction."""
    inter = cm[c, c]
    union = cm[c, :].sum() + cm[:, c].sum() - inter
    if union == 0:
        return None
    return float(inter / union)


def per_class_iou(cm: np.ndarray) -> list[float | None]:
    return [iou(cm, c) for c in range(cm.shape[0])]


def mean_iou(ious: list[float | None], undefined: str = "exclude") -> float:
    if undefined not in ("exclude", "zero"):
        raise ValueError("undefined must be 'exclude' or 'zero'")
    vals = [0.0 if v is None else v for v in ious] if undefined == "zero" else [v for v in ious if v is not None]
    return float(np.mean(vals)) if vals else math.nan


def pixel_ratios(labels, num_classes: int, ignore_index: int = IGNORE_INDEX) -> list[float]:
    """Share of non-ignored pixels per class, counted class by class."""
    counts = [0] * num_classes
    total = 0
    for lbl in labels:
        lbl = np.asarray(lbl)
        for c in range(num_classes):
            counts[c] += int(np.count_nonzero(lbl == c))
        total += int(np.count_nonzero(lbl != ignore_index))
    return [cnt / total if total else 0.0 for cnt in counts]


@dataclass
class MetricsReport:
    class_names: list[str]
    iou: list[float | None]
    miou: float
    ratios: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    iou_std: list[float | None] | None = None
    miou_std: float | None = None

    def formatted(self) -> dict[str, str]:
        """Percent strings, mean±std when aggregated."""
        out = {}
        for i, name in enumerate(self.class_names):
            out[name] = _fmt(self.iou[i], None if self.iou_std is None else self.iou_std[i])
        out["mean IoU"] = _fmt(self.miou, self.miou_std)
        return out


def _fmt(v, s):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    return f"{100 * v:.2f}" if s is None else f"{100 * v:.2f}±{100 * s:.2f}"


def report_from_confusion(cm, class_names, seeds=(), ratios=(), undefined="exclude") -> MetricsReport:
    ious = per_class_iou(cm)
    return MetricsReport(list(class_names), ious, mean_iou(ious, undefined), list(ratios), list(seeds))


def predict(model, image: np.ndarray) -> np.ndarray:
    logits, _ = model(Tensor(image[None] if image.ndim == 3 else image))
    return logits.data.argmax(axis=-3)


def evaluate_model(model, images, labels, class_names, seed=None, undefined="exclude") -> MetricsReport:
    cm = new_confusion(len(class_names))
    for img, lbl in zip(images, labels):
        cm = accumulate(cm, predict(model, img.astype(model_dtype(model)))[0], lbl)
    seeds = [] if seed is None else [seed]
    return report_from_confusion(cm, class_names, seeds, pixel_ratios(labels, len(class_names)), undefined)


def model_dtype(model):
    return next(iter(model.params.values())).dtype


def aggregate_seeds(reports: list[MetricsReport]) -> MetricsReport:
    """Mean and population std across seeds, per class and for mIoU."""
    if not reports:
        raise ValueError("aggregate_seeds needs at least one report")
    names = reports[0].class_names
    if any(r.class_names != names for r in reports):
        raise ValueError("reports cover different class sets")
    means, stds = [], []
    for c in range(len(names)):
        vals = [r.iou[c] for r in reports if r.iou[c] is not None]
        if vals:
            means.append(float(np.mean(vals)))
            stds.append(float(np.std(vals)))
        else:
            means.append(None)
            stds.append(None)
    m = np.array([r.miou for r in reports], dtype=float)
    seeds = [s for r in reports for s in r.seeds]
    return MetricsReport(list(names), means, float(m.mean()), list(reports[0].ratios), seeds, stds, float(m.std()))


def _col(name: str) -> str:
    return "iou_" + name.replace(" ", "_").replace("-", "_")


def report_columns(class_names) -> list[str]:
    cols = ["variant", "labeled_ratio", "seed"]
    for n in class_names:
        cols += [_col(n), _col(n) + "_std"]
    return cols + ["miou", "miou_std"]


def report_row(variant: str, labeled_ratio, seed, report: MetricsReport) -> dict:
    row = {"variant": variant, "labeled_ratio": labeled_ratio, "seed": seed}
    for i, n in enumerate(report.class_names):
        row[_col(n)] = "" if report.iou[i] is None else repr(report.iou[i])
        std = None if report.iou_std is None else report.iou_std[i]
        row[_col(n) + "_std"] = "" if std is None else repr(std)
    row["miou"] = repr(report.miou)
    row["miou_std"] = "" if report.miou_std is None else repr(report.miou_std)
    return row


def write_report_csv(path, rows: list[dict], class_names) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=report_columns(class_names))
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_report_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
