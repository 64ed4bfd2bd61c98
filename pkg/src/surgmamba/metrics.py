"""Video-wise accuracy and phase-wise precision / recall / Jaccard, in percent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PhaseMetrics:
    acc: float
    precision: float
    recall: float
    jaccard: float

    def as_dict(self) -> dict[str, float]:
        return {"acc": self.acc, "precision": self.precision, "recall": self.recall, "jaccard": self.jaccard}


def confusion_counts(pred, true, n_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pred, true = np.asarray(pred), np.asarray(true)
    tp = np.array([np.sum((pred == p) & (true == p)) for p in range(n_classes)], dtype=float)
    fp = np.array([np.sum((pred == p) & (true != p)) for p in range(n_classes)], dtype=float)
    fn = np.array([np.sum((pred != p) & (true == p)) for p in range(n_classes)], dtype=float)
    return tp, fp, fn


def _phase_mean(num: np.ndarray, den: np.ndarray) -> float:
    # 0/0 phases are undefined for that video and skipped
    ok = den > 0
    return float(np.mean(num[ok] / den[ok])) if ok.any() else float("nan")


def video_metrics(pred, true, n_classes: int) -> PhaseMetrics:
    tp, fp, fn = confusion_counts(pred, true, n_classes)
    acc = float(np.mean(np.asarray(pred) == np.asarray(true)))
    return PhaseMetrics(acc, _phase_mean(tp, tp + fp), _phase_mean(tp, tp + fn), _phase_mean(tp, tp + fp + fn))


def phase_metrics(preds: list, trues: list, n_classes: int) -> PhaseMetrics:
    per_video = [video_metrics(p, t, n_classes) for p, t in zip(preds, trues)]

    def avg(name):
        vals = [getattr(m, name) for m in per_video]
        vals = [v for v in vals if not np.isnan(v)]
        return 100.0 * float(np.mean(vals)) if vals else float("nan")

    return PhaseMetrics(avg("acc"), avg("precision"), avg("recall"), avg("jaccard"))
