"""Confusion matrices and the Se / Sp / Ppr / Acc family of beat-level metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .dataset import EXCLUDED


@dataclass
class ConfusionMatrix:
    labels: tuple
    counts: np.ndarray  # rows = reference, columns = predicted

    def __post_init__(self):
        self.labels = tuple(self.labels)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        m = len(self.labels)
        if self.counts.shape != (m, m):
            raise ValueError(f"counts must be {m}x{m}")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")

    @classmethod
    def zeros(cls, labels):
        return cls(labels, np.zeros((len(labels), len(labels)), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self, k: int) -> tuple[int, int, int, int]:
        """(TP, FP, TN, FN) for class index k."""
        c = self.counts
        tp = int(c[k, k])
        fn = int(c[k].sum()) - tp
        fp = int(c[:, k].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, fp, tn, fn


def confusion_from_beats(reference, predicted, labels) -> ConfusionMatrix:
    """Tally aligned reference/predicted labels; 'excluded' references are skipped."""
    if len(reference) != len(predicted):
        raise ValueError(f"length mismatch: {len(reference)} reference vs {len(predicted)} predicted")
    index = {lab: i for i, lab in enumerate(labels)}
    cm = ConfusionMatrix.zeros(labels)
    for r, p in zip(reference, predicted):
        if r == EXCLUDED:
            continue
        ri = index[r] if not isinstance(r, (int, np.integer)) else int(r)
        pi = index[p] if not isinstance(p, (int, np.integer)) else int(p)
        cm.counts[ri, pi] += 1
    return cm


@dataclass
class Metrics:
    """Percentages; ``None`` marks an undefined value (zero denominator)."""

    se: float | None
    sp: float | None
    ppr: float | None
    acc: float | None

    def as_tuple(self):
        return (self.se, self.sp, self.ppr, self.acc)


def _pct(num, den):
    return None if den == 0 else 100.0 * num / den


def class_metrics(cm: ConfusionMatrix, cls) -> Metrics:
    k = cm.labels.index(cls) if not isinstance(cls, (int, np.integer)) else int(cls)
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    tp, fp, tn, fn = cm.one_vs_rest(k)
    return Metrics(_pct(tp, tp + fn), _pct(tn, tn + fp), _pct(tp, tp + fp), _pct(tp + tn, tp + fp + tn + fn))


def overall_metrics(cm: ConfusionMatrix) -> Metrics:
    """Per-class metrics averaged with weights equal to reference-class frequency.

    Classes whose metric is undefined are left out and the remaining weights
    renormalised.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    weights = cm.counts.sum(axis=1).astype(float)
    per = [class_metrics(cm, k).as_tuple() for k in range(len(cm.labels))]
    out = []
    for j in range(4):
        num = den = 0.0
        for k, vals in enumerate(per):
            if vals[j] is not None and weights[k] > 0:
                num += weights[k] * vals[j]
                den += weights[k]
        out.append(num / den if den else None)
    return Metrics(*out)


def merge_folds(matrices) -> ConfusionMatrix:
    matrices = list(matrices)
    if not matrices:
        raise ValueError("nothing to merge")
    labels = matrices[0].labels
    for cm in matrices[1:]:
        if cm.labels != labels:
            raise ValueError(f"vocabulary mismatch: {cm.labels} vs {labels}")
    return ConfusionMatrix(labels, sum(cm.counts for cm in matrices))


# ---------------------------------------------------------------------------
# formatting
# ---------------------------------------------------------------------------


def fmt_pct(v) -> str:
    return "undef" if v is None else f"{v:.2f}"


def metrics_rows(cm: ConfusionMatrix):
    rows = [(lab, class_metrics(cm, lab)) for lab in cm.labels]
    rows.append(("Overall", overall_metrics(cm)))
    return rows


def format_report(cm: ConfusionMatrix, title: str = "") -> str:
    """Aligned text table: confusion counts followed by Se/Sp/Ppr/Acc per class."""
    labs = list(cm.labels)
    width = max(8, max(len(x) for x in labs) + 2, len(str(cm.counts.max())) + 2)
    lines = [title] if title else []
    lines.append("ref\\pred".ljust(10) + "".join(l.rjust(width) for l in labs)
                 + "".join(h.rjust(8) for h in ("Se%", "Sp%", "Ppr%", "Acc%")))
    for (lab, m), row in zip(metrics_rows(cm), cm.counts):
        lines.append(lab.ljust(10) + "".join(str(v).rjust(width) for v in row)
                     + "".join(fmt_pct(v).rjust(8) for v in m.as_tuple()))
    m = overall_metrics(cm)
    lines.append("Overall".ljust(10) + " " * (width * len(labs))
                 + "".join(fmt_pct(v).rjust(8) for v in m.as_tuple()))
    return "\n".join(lines) + "\n"


def metrics_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "support", "Se", "Sp", "Ppr", "Acc"])
    support = cm.counts.sum(axis=1)
    for k, (lab, m) in enumerate(metrics_rows(cm)):
        sup = int(support[k]) if k < len(cm.labels) else cm.total
        w.writerow([lab, sup] + ["" if v is None else f"{v:.4f}" for v in m.as_tuple()])
    return buf.getvalue()


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["reference"] + list(cm.labels))
    for lab, row in zip(cm.labels, cm.counts):
        w.writerow([lab] + [int(v) for v in row])
    return buf.getvalue()


def parse_confusion_csv(text: str) -> ConfusionMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    labels = rows[0][1:]
    return ConfusionMatrix(labels, [[int(v) for v in r[1:]] for r in rows[1:]])
