"""Class-wise Dice evaluation on hard label maps."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume import ClassMap, Volume


@dataclass
class MetricsReport:
    classes: ClassMap
    confusion: np.ndarray  # (C, C) voxel counts, rows = truth, columns = prediction
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    per_class_dsc: np.ndarray  # NaN for absent or unevaluated classes
    evaluated: np.ndarray  # class ids that are present in truth or prediction
    median: float
    q16: float
    q84: float
    nonzero_fraction: float  # percent of evaluated classes with DSC > 0

    @property
    def included(self) -> np.ndarray:
        """Class ids entering the quantile summary (DSC > 0)."""
        d = self.per_class_dsc[self.evaluated]
        return self.evaluated[d > 0]

    def summary(self) -> dict:
        """Quantile summary with NaN mapped to None so it serialises as JSON null."""
        def clean(x):
            return None if x is None or np.isnan(x) else float(x)

        return {
            "median": clean(self.median),
            "q16": clean(self.q16),
            "q84": clean(self.q84),
            "nonzero_fraction": clean(self.nonzero_fraction),
            "evaluated_classes": int(self.evaluated.size),
        }


def confusion_matrix(prediction: np.ndarray, truth: np.ndarray, classes: int) -> np.ndarray:
    p = np.asarray(prediction, dtype=np.int64).ravel()
    t = np.asarray(truth, dtype=np.int64).ravel()
    return np.bincount(t * classes + p, minlength=classes * classes).reshape(classes, classes)


def quantile_summary(values: Sequence[float]) -> tuple[float, float, float]:
    """(median, q16, q84) with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    q16, med, q84 = np.percentile(v, [16.0, 50.0, 84.0], method="linear")
    return float(med), float(q16), float(q84)


def report_from_confusion(conf: np.ndarray, classes: ClassMap, include_background: bool = False) -> MetricsReport:
    conf = np.asarray(conf, dtype=np.int64)
    C = classes.count
    if conf.shape != (C, C):
        raise ValueError(f"confusion matrix {conf.shape} does not match {C} classes")
    tp = np.diag(conf).copy()
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    dsc = np.full(C, np.nan)
    present = denom > 0
    dsc[present] = 2 * tp[present] / denom[present]
    ids = np.arange(C)
    evaluated = ids[present & ((ids > 0) | include_background)]
    vals = dsc[evaluated]
    nonzero = vals[vals > 0]
    med, q16, q84 = quantile_summary(nonzero)
    frac = 100.0 * nonzero.size / evaluated.size if evaluated.size else float("nan")
    return MetricsReport(classes, conf, tp, fp, fn, dsc, evaluated, med, q16, q84, frac)


def evaluate(prediction, truth, classes: ClassMap | int, include_background: bool = False) -> MetricsReport:
    """Per-class DSC = 2TP / (2TP + FP + FN) plus the quantile summary.

    Classes missing from both maps are absent (NaN). Classes with zero true
    positives are left out of the median and quantiles and lower the
    non-zero fraction. Background (class 0) is skipped unless asked for.
    """
    if isinstance(classes, int):
        classes = ClassMap.generic(classes)
    p = prediction.data if isinstance(prediction, Volume) else np.asarray(prediction)
    t = truth.data if isinstance(truth, Volume) else np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction dims {p.shape} != truth dims {t.shape}")
    return report_from_confusion(confusion_matrix(p, t, classes.count), classes, include_background)


def confusion_submatrix(report: MetricsReport, subset: Sequence[int]) -> np.ndarray:
    idx = np.asarray(subset, dtype=np.int64)
    return report.confusion[np.ix_(idx, idx)]


def pair_confusion(confusion: np.ndarray, pairs: Sequence[tuple[int, int]]) -> int:
    """Voxels of one class of a pair predicted as its partner, both directions, summed over pairs."""
    return int(sum(confusion[a, b] + confusion[b, a] for a, b in pairs))


def write_report(report: MetricsReport, out_dir, stem: str = "metrics") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = report.classes.names
    per_class = out / f"{stem}_per_class.csv"
    with per_class.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "name", "dsc", "tp", "fp", "fn"])
        for c in range(report.classes.count):
            d = report.per_class_dsc[c]
            w.writerow([c, names[c], "" if np.isnan(d) else f"{d:.6f}", report.tp[c], report.fp[c], report.fn[c]])
    summary = out / f"{stem}_summary.json"
    summary.write_text(json.dumps(report.summary(), indent=2))
    conf = out / f"{stem}_confusion.csv"
    with conf.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth\\pred"] + list(names))
        for c in range(report.classes.count):
            w.writerow([names[c]] + [int(v) for v in report.confusion[c]])
    return {"per_class": per_class, "summary": summary, "confusion": conf}
