"""Classification metrics: confusion matrix, per-class precision/recall/F1,
one-vs-rest ROC curves and AUC, and the serialisable evaluation report."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetError, DatasetSplit
from .model import Model, predict_proba


def confusion_matrix(true_labels, pred_labels, k: int = 4) -> np.ndarray:
    """k x k counts; rows are true classes, columns predictions."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
    return np.bincount(t * k + p, minlength=k * k).reshape(k, k)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


def _ratio(num, den, flag, flags):
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def prf1(confusion) -> tuple[list[ClassMetrics], ClassMetrics, list[str]]:
    """Per-class metrics, support-weighted averages, and zero-denominator flags.

    An undefined ratio is reported as 0 and flagged, e.g.
    ``"precision_undefined:2"`` when class 2 is never predicted.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    flags: list[str] = []
    per = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        pred = int(cm[:, c].sum())
        sup = int(cm[c, :].sum())
        p = _ratio(tp, pred, f"precision_undefined:{c}", flags)
        r = _ratio(tp, sup, f"recall_undefined:{c}", flags)
        f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        per.append(ClassMetrics(p, r, f, sup))
    total = sum(m.support for m in per)
    if total == 0:
        flags.append("weighted_undefined")
        weighted = ClassMetrics(0.0, 0.0, 0.0, 0)
    else:
        weighted = ClassMetrics(
            sum(m.precision * m.support for m in per) / total,
            sum(m.recall * m.support for m in per) / total,
            sum(m.f1 * m.support for m in per) / total,
            total,
        )
    return per, weighted, flags


# -------------------------------------------------------------------- ROC


def roc_counts(scores, positive):
    """Cumulative (fp, tp) integer counts at each distinct threshold, highest
    first, starting from the (0, 0) point, plus the thresholds."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    # last index of each run of tied scores
    cut = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.r_[0, np.cumsum(pos)[cut]]
    fp = np.r_[0, np.cumsum(~pos)[cut]]
    thresholds = np.r_[np.inf, s[cut]]
    return fp, tp, thresholds


def binary_auc(scores, positive) -> float:
    """Trapezoidal area under the ROC curve, evaluated in integer arithmetic
    so it equals the Mann-Whitney statistic (ties count one half) exactly."""
    fp, tp, _ = roc_counts(scores, positive)
    n_pos, n_neg = int(tp[-1]), int(fp[-1])
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * n_pos * n_neg)


@dataclass
class RocResult:
    per_class_auc: list[float]
    macro_auc: float
    curves: dict[int, dict[str, list[float]]]
    flags: list[str] = field(default_factory=list)


def roc_auc_ovr(scores, true_labels, k: int | None = None) -> RocResult:
    """One-vs-rest ROC per class. Classes absent from (or making up all of)
    the labels get NaN AUC, are flagged and excluded from the macro mean."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    k = scores.shape[1] if k is None else k
    aucs, curves, flags = [], {}, []
    for c in range(k):
        pos = labels == c
        fp, tp, thr = roc_counts(scores[:, c], pos)
        n_pos, n_neg = int(tp[-1]), int(fp[-1])
        if n_pos == 0 or n_neg == 0:
            flags.append(f"auc_undefined:{c}")
            aucs.append(float("nan"))
            curves[c] = {"fpr": [], "tpr": [], "threshold": []}
            continue
        aucs.append(binary_auc(scores[:, c], pos))
        curves[c] = {"fpr": (fp / n_neg).tolist(), "tpr": (tp / n_pos).tolist(),
                     "threshold": thr.tolist()}
    defined = [a for a in aucs if not math.isnan(a)]
    macro = float(np.mean(defined)) if defined else float("nan")
    return RocResult(aucs, macro, curves, flags)


# ----------------------------------------------------------------- report


@dataclass
class EvalReport:
    class_names: list[str]
    confusion: list[list[int]]
    per_class: list[ClassMetrics]
    weighted: ClassMetrics
    accuracy: float
    per_class_auc: list[float]
    macro_auc: float
    roc: dict[int, dict[str, list[float]]]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc"] = {str(k): v for k, v in self.roc.items()}
        return d

    def to_json(self) -> str:
        # non-finite floats (undefined AUCs, the leading +inf ROC threshold) become null
        def clean(o):
            if isinstance(o, float):
                return o if math.isfinite(o) else None
            if isinstance(o, dict):
                return {k: clean(v) for k, v in o.items()}
            if isinstance(o, list):
                return [clean(v) for v in o]
            return o

        return json.dumps(clean(self.to_dict()), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        d = json.loads(text)
        nan = float("nan")
        roc = {int(k): {kk: [math.inf if x is None else x for x in vv] for kk, vv in v.items()}
               for k, v in d["roc"].items()}
        return cls(
            class_names=d["class_names"],
            confusion=d["confusion"],
            per_class=[ClassMetrics(**m) for m in d["per_class"]],
            weighted=ClassMetrics(**d["weighted"]),
            accuracy=d["accuracy"],
            per_class_auc=[nan if a is None else a for a in d["per_class_auc"]],
            macro_auc=nan if d["macro_auc"] is None else d["macro_auc"],
            roc=roc,
            flags=d["flags"],
        )

    def write(self, out_dir, prefix: str = "eval") -> None:
        """``<prefix>_report.json``, ``<prefix>_confusion.csv``, ``<prefix>_roc.csv``."""
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{prefix}_report.json").write_text(self.to_json())
        with open(out / f"{prefix}_confusion.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + self.class_names)
            for name, row in zip(self.class_names, self.confusion):
                w.writerow([name] + list(row))
        with open(out / f"{prefix}_roc.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "fpr", "tpr", "threshold"])
            for c, curve in sorted(self.roc.items()):
                for f, t, th in zip(curve["fpr"], curve["tpr"], curve["threshold"]):
                    w.writerow([self.class_names[c], repr(f), repr(t), repr(th)])


def report_from_scores(scores, true_labels, class_names) -> EvalReport:
    scores = np.asarray(scores)
    labels = np.asarray(true_labels, dtype=np.int64)
    k = len(class_names)
    cm = confusion_matrix(labels, scores.argmax(axis=1), k)
    per, weighted, flags = prf1(cm)
    roc = roc_auc_ovr(scores, labels, k)
    return EvalReport(
        class_names=list(class_names),
        confusion=cm.tolist(),
        per_class=per,
        weighted=weighted,
        accuracy=float(np.trace(cm) / cm.sum()),
        per_class_auc=roc.per_class_auc,
        macro_auc=roc.macro_auc,
        roc=roc.curves,
        flags=flags + roc.flags,
    )


def evaluate(model: Model, split: DatasetSplit, batch_size: int = 64) -> EvalReport:
    if len(split) == 0:
        raise DatasetError("cannot evaluate on an empty split")
    probs = predict_proba(model, split.images, batch_size)
    names = split.class_names
    if len(names) != model.config.num_classes:
        names = [str(i) for i in range(model.config.num_classes)]
    return report_from_scores(probs, split.labels, names)
