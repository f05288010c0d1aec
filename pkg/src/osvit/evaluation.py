"""Confusion matrices, per-class precision/recall/F1, and report rendering.

Rows index the true class code, columns the predicted code. Counts stay in
integer arithmetic until the final division, so accuracy is exactly
trace/total. Degenerate 0/0 ratios (a class never predicted or never
present) are defined as 0 rather than an error. Macro averages are plain
arithmetic means over the three classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import SurvivalClass
from .errors import ConfigError

NUM_CLASSES = 3
_CLASS_NAMES = {c: c.name.capitalize() for c in SurvivalClass}


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: tuple  # 3x3 nested tuples, [true][pred]

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def as_array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: tuple
    recall: tuple
    f1: tuple
    macro_precision: float
    macro_recall: float
    macro_f1: float
    total: int
    partition: str = ""


def confusion(true_codes, pred_codes) -> ConfusionMatrix:
    true_codes = np.asarray(true_codes, dtype=np.int64).reshape(-1)
    pred_codes = np.asarray(pred_codes, dtype=np.int64).reshape(-1)
    if true_codes.shape != pred_codes.shape:
        raise ConfigError(f"length mismatch: {true_codes.shape[0]} true vs "
                          f"{pred_codes.shape[0]} predicted")
    for label, codes in (("true", true_codes), ("predicted", pred_codes)):
        if codes.size and (codes.min() < 0 or codes.max() >= NUM_CLASSES):
            raise ConfigError(f"{label} codes must be in [0, {NUM_CLASSES})")
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(counts, (true_codes, pred_codes), 1)
    return ConfusionMatrix(tuple(tuple(int(c) for c in row) for row in counts))


def _ratio(num: int, den: int) -> float:
    return 0.0 if den == 0 else num / den


def metrics(cm: ConfusionMatrix, partition: str = "") -> MetricsReport:
    counts = cm.as_array()
    total = int(counts.sum())
    if total == 0:
        raise ConfigError("metrics are undefined for an empty confusion matrix")
    precision, recall, f1 = [], [], []
    for c in range(NUM_CLASSES):
        tp = int(counts[c, c])
        p = _ratio(tp, int(counts[:, c].sum()))
        r = _ratio(tp, int(counts[c, :].sum()))
        precision.append(p)
        recall.append(r)
        f1.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    return MetricsReport(
        accuracy=int(np.trace(counts)) / total,
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        macro_precision=sum(precision) / NUM_CLASSES,
        macro_recall=sum(recall) / NUM_CLASSES,
        macro_f1=sum(f1) / NUM_CLASSES,
        total=total,
        partition=partition,
    )


def report_as_dict(report: MetricsReport, cm: ConfusionMatrix) -> dict:
    return {
        "partition": report.partition,
        "samples": report.total,
        "accuracy": report.accuracy,
        "confusion_matrix": [list(row) for row in cm.counts],
        "classes": [
            {"code": int(c), "name": _CLASS_NAMES[c],
             "precision": report.precision[c], "recall": report.recall[c],
             "f1": report.f1[c]}
            for c in SurvivalClass
        ],
        "macro": {"precision": report.macro_precision, "recall": report.macro_recall,
                  "f1": report.macro_f1},
    }


def render_report(report: MetricsReport, cm: ConfusionMatrix, format: str = "text") -> str:
    if format == "json":
        return json.dumps(report_as_dict(report, cm), indent=2, sort_keys=True)
    if format != "text":
        raise ConfigError(f"unknown report format {format!r}; use 'text' or 'json'")
    lines = []
    if report.partition:
        lines.append(f"partition: {report.partition}")
    lines.append(f"samples: {report.total}")
    lines.append("")
    lines.append("confusion matrix (rows = true, cols = predicted)")
    header = "           " + "".join(f"{int(c):>8d}" for c in SurvivalClass)
    lines.append(header)
    for c in SurvivalClass:
        row = "".join(f"{cm.counts[int(c)][int(p)]:>8d}" for p in SurvivalClass)
        lines.append(f"{int(c)} {_CLASS_NAMES[c]:<8s} {row}")
    lines.append("legend: 0 Long, 1 Medium, 2 Short survival")
    lines.append("")
    lines.append(f"{'class':<10s}{'precision':>10s}{'recall':>10s}{'f1':>10s}")
    for c in SurvivalClass:
        lines.append(f"{_CLASS_NAMES[c]:<10s}{report.precision[c]:>10.4f}"
                     f"{report.recall[c]:>10.4f}{report.f1[c]:>10.4f}")
    lines.append(f"{'average':<10s}{report.macro_precision:>10.4f}"
                 f"{report.macro_recall:>10.4f}{report.macro_f1:>10.4f}")
    lines.append("")
    lines.append(f"accuracy: {report.accuracy * 100:.1f}%")
    return "\n".join(lines)
