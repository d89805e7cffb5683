"""Confusion matrices and epoch-level scoring.

Rows of a confusion matrix are ground truth, columns are predictions.
Rates that are undefined (empty row or column) are reported as ``None``
rather than zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .signal_io import STAGE_NAMES


def confusion(truth, pred, n_classes: int = 5) -> np.ndarray:
    t = np.asarray(truth, dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ShapeError(f"truth has {t.size} labels, predictions {p.size}")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= n_classes):
        raise ValueError("label outside the class range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _ratio(num, den):
    return None if den == 0 else float(num) / float(den)


@dataclass
class ClassRates:
    sensitivity: list[float | None]
    selectivity: list[float | None]
    specificity: list[float | None]


def class_rates(cm) -> ClassRates:
    cm = np.asarray(cm)
    total = cm.sum()
    tp = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    sens = [_ratio(tp[c], rows[c]) for c in range(len(cm))]
    sel = [_ratio(tp[c], cols[c]) for c in range(len(cm))]
    spec = []
    for c in range(len(cm)):
        fp = cols[c] - tp[c]
        tn = total - rows[c] - cols[c] + tp[c]
        spec.append(_ratio(tn, tn + fp))
    return ClassRates(sens, sel, spec)


def accuracy(cm) -> float | None:
    cm = np.asarray(cm)
    return _ratio(np.trace(cm), cm.sum())


def kappa(cm) -> float | None:
    """Cohen's kappa; ``None`` when chance agreement is 1."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("kappa of an empty confusion matrix")
    po = np.trace(cm) / total
    pe = float(np.sum(cm.sum(axis=0) * cm.sum(axis=1))) / total ** 2
    if np.isclose(pe, 1.0, rtol=0, atol=1e-15):
        return None
    return float((po - pe) / (1.0 - pe))


def per_class_f1(cm) -> tuple[list[float], list[int]]:
    """Per-class F1 and the classes whose precision or recall is undefined.

    Flagged classes score 0.
    """
    cm = np.asarray(cm)
    tp = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    f1, flagged = [], []
    for c in range(len(cm)):
        if rows[c] == 0 or cols[c] == 0:
            f1.append(0.0)
            flagged.append(c)
        else:
            f1.append(2.0 * tp[c] / (rows[c] + cols[c]))
    return f1, flagged


def macro_f1(cm) -> float:
    if np.asarray(cm).sum() == 0:
        raise ValueError("macro F1 of an empty confusion matrix")
    f1, _ = per_class_f1(cm)
    return float(np.mean(f1))


def _defined_mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def stratify_transitions(labels) -> tuple[np.ndarray, np.ndarray]:
    """(non_transition, transition) masks for one recording.

    An epoch is non-transition when both neighbours exist and carry its label.
    """
    y = np.asarray(labels)
    stable = np.zeros(len(y), dtype=bool)
    if len(y) >= 3:
        stable[1:-1] = (y[1:-1] == y[:-2]) & (y[1:-1] == y[2:])
    return stable, ~stable


@dataclass
class EvalReport:
    confusion: np.ndarray
    overall_accuracy: float | None
    kappa: float | None
    macro_f1: float
    mean_sensitivity: float | None
    mean_specificity: float | None
    mean_selectivity: float | None
    rates: ClassRates
    f1: list[float]
    flags: list[str] = field(default_factory=list)
    strata: dict[str, "EvalReport"] = field(default_factory=dict)

    @property
    def n_epochs(self) -> int:
        return int(self.confusion.sum())

    def to_text(self) -> str:
        out = io.StringIO()
        self._write_text(out, "")
        return out.getvalue()

    def _write_text(self, out, indent):
        def fmt(v):
            return "undefined" if v is None else f"{v:.6f}"

        out.write(f"{indent}epochs = {self.n_epochs}\n")
        out.write(f"{indent}overall_accuracy = {fmt(self.overall_accuracy)}\n")
        out.write(f"{indent}kappa = {fmt(self.kappa)}\n")
        out.write(f"{indent}macro_f1 = {fmt(self.macro_f1)}\n")
        out.write(f"{indent}mean_sensitivity = {fmt(self.mean_sensitivity)}\n")
        out.write(f"{indent}mean_specificity = {fmt(self.mean_specificity)}\n")
        out.write(f"{indent}mean_selectivity = {fmt(self.mean_selectivity)}\n")
        out.write(f"{indent}flags = {','.join(self.flags) if self.flags else 'none'}\n")
        out.write(f"{indent}class sensitivity selectivity specificity f1\n")
        for c, name in enumerate(STAGE_NAMES[:len(self.confusion)]):
            out.write(f"{indent}{name} {fmt(self.rates.sensitivity[c])} "
                      f"{fmt(self.rates.selectivity[c])} {fmt(self.rates.specificity[c])} "
                      f"{fmt(self.f1[c])}\n")
        out.write(f"{indent}confusion (rows = truth, columns = prediction)\n")
        for row in self.confusion:
            out.write(indent + " ".join(str(int(v)) for v in row) + "\n")
        for name, sub in sorted(self.strata.items()):
            out.write(f"{indent}[{name}]\n")
            sub._write_text(out, indent + "  ")

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["subset", "metric", "class", "value"])
        self._write_csv(w, "all")
        return out.getvalue()

    def _write_csv(self, w, subset):
        def v(x):
            return "" if x is None else repr(float(x))

        w.writerow([subset, "epochs", "", self.n_epochs])
        for key in ("overall_accuracy", "kappa", "macro_f1", "mean_sensitivity",
                    "mean_specificity", "mean_selectivity"):
            w.writerow([subset, key, "", v(getattr(self, key))])
        for c, name in enumerate(STAGE_NAMES[:len(self.confusion)]):
            w.writerow([subset, "sensitivity", name, v(self.rates.sensitivity[c])])
            w.writerow([subset, "selectivity", name, v(self.rates.selectivity[c])])
            w.writerow([subset, "specificity", name, v(self.rates.specificity[c])])
            w.writerow([subset, "f1", name, v(self.f1[c])])
        for name, sub in sorted(self.strata.items()):
            sub._write_csv(w, name)


def report_from_confusion(cm) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    rates = class_rates(cm)
    f1, flagged = per_class_f1(cm)
    flags = [f"f1_undefined:{STAGE_NAMES[c]}" for c in flagged]
    for kind, vals in (("sensitivity", rates.sensitivity), ("selectivity", rates.selectivity),
                       ("specificity", rates.specificity)):
        flags += [f"{kind}_undefined:{STAGE_NAMES[c]}" for c, x in enumerate(vals) if x is None]
    total = cm.sum()
    k = kappa(cm) if total else None
    if total and k is None:
        flags.append("kappa_undefined")
    return EvalReport(
        confusion=cm,
        overall_accuracy=accuracy(cm),
        kappa=k,
        macro_f1=float(np.mean(f1)) if total else 0.0,
        mean_sensitivity=_defined_mean(rates.sensitivity),
        mean_specificity=_defined_mean(rates.specificity),
        mean_selectivity=_defined_mean(rates.selectivity),
        rates=rates,
        f1=f1,
        flags=flags,
    )


def evaluate(truth_per_recording: Sequence, pred_per_recording: Sequence,
             stratify: bool = True, n_classes: int = 5) -> EvalReport:
    """Report over several recordings, with optional transition strata."""
    if len(truth_per_recording) != len(pred_per_recording):
        raise ShapeError("recording count mismatch")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    cm_stable = cm.copy()
    cm_trans = cm.copy()
    for t, p in zip(truth_per_recording, pred_per_recording):
        t, p = np.asarray(t), np.asarray(p)
        cm += confusion(t, p, n_classes)
        if stratify:
            stable, trans = stratify_transitions(t)
            cm_stable += confusion(t[stable], p[stable], n_classes)
            cm_trans += confusion(t[trans], p[trans], n_classes)
    report = report_from_confusion(cm)
    if stratify:
        report.strata = {"non_transition": report_from_confusion(cm_stable),
                         "transition": report_from_confusion(cm_trans)}
    return report
