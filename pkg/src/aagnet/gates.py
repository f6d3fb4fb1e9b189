"""Gate-activation analysis: per-sample mean alpha and its class-conditional
statistics, keyed both by true and by predicted class."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetError, DatasetSplit
from .model import Model, forward


@dataclass
class ClassGateStats:
    count: int
    mean: float
    std: float
    min: float
    max: float


@dataclass
class GateReport:
    class_names: list[str]
    sample_alpha: np.ndarray  # N, mean over the gate dimensions
    labels: np.ndarray
    predictions: np.ndarray
    by_true: list[ClassGateStats]
    by_pred: list[ClassGateStats]
    dim_mean: np.ndarray  # per-dimension mean alpha over all samples

    @property
    def population_mean(self) -> float:
        return float(self.sample_alpha.mean())


def _stats(values: np.ndarray) -> ClassGateStats:
    if values.size == 0:
        nan = float("nan")
        return ClassGateStats(0, nan, nan, nan, nan)
    return ClassGateStats(int(values.size), float(values.mean()), float(values.std()),
                          float(values.min()), float(values.max()))


def summarize_gates(alpha: np.ndarray, labels, predictions, class_names) -> GateReport:
    """Aggregate an N x F alpha matrix."""
    alpha = np.asarray(alpha)
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    sample = alpha.mean(axis=1)
    k = len(class_names)
    return GateReport(
        class_names=list(class_names),
        sample_alpha=sample,
        labels=labels,
        predictions=predictions,
        by_true=[_stats(sample[labels == c]) for c in range(k)],
        by_pred=[_stats(sample[predictions == c]) for c in range(k)],
        dim_mean=alpha.mean(axis=0),
    )


def collect_gates(model: Model, split: DatasetSplit, batch_size: int = 64) -> GateReport:
    """Inference-mode forward passes over ``split`` with alpha surfaced."""
    if len(split) == 0:
        raise DatasetError("cannot collect gate activations on an empty split")
    alphas, preds = [], []
    for i in range(0, len(split), batch_size):
        out = forward(model, split.images[i:i + batch_size])
        alphas.append(out.alpha.data)
        preds.append(out.logits.data.argmax(axis=1))
    names = split.class_names
    if len(names) != model.config.num_classes:
        names = [str(i) for i in range(model.config.num_classes)]
    return summarize_gates(np.concatenate(alphas), split.labels, np.concatenate(preds), names)


CSV_FIELDS = ("section", "key", "class", "count", "mean", "std", "min", "max")


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(np.float32(v)))


def gate_summary_csv(report: GateReport, path) -> str:
    """Write the class rows (``by_true``/``by_pred``) and the per-dimension
    means (``dimension`` rows). Returns the SHA-256 of the file contents."""
    rows = []
    for key, stats in (("true", report.by_true), ("pred", report.by_pred)):
        for name, s in zip(report.class_names, stats):
            rows.append(["class", key, name, s.count, _fmt(s.mean), _fmt(s.std), _fmt(s.min),
                         _fmt(s.max)])
    for d, m in enumerate(report.dim_mean):
        rows.append(["dimension", str(d), "", "", _fmt(m), "", "", ""])
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        w.writerows(rows)
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_gate_csv(path) -> dict:
    """Parse :func:`gate_summary_csv` output back into plain dicts."""
    out = {"true": {}, "pred": {}, "dimension": []}

    def num(v):
        return float("nan") if v == "" else float(v)

    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["section"] == "class":
                out[r["key"]][r["class"]] = {
                    "count": int(r["count"]),
                    **{f: num(r[f]) for f in ("mean", "std", "min", "max")},
                }
            else:
                out["dimension"].append(num(r["mean"]))
    return out
