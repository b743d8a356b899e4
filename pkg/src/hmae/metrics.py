"""Classification metrics, the repeated-run protocol and JSON reports."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [true, predicted]
    class_names: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(y_true, y_pred, n_classes: int, class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise MetricError(f"label arrays differ in length: {y_true.shape} vs {y_pred.shape}")
    for arr, tag in ((y_true, "true"), (y_pred, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise MetricError(f"{tag} label out of range [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(n_classes)]
    return ConfusionMatrix(cm, names)


@dataclass
class F1Scores:
    per_class: list
    macro: float
    weighted: float
    zero_division: list  # class indices where the 0/0 convention applied


def f1_scores(cm: ConfusionMatrix) -> F1Scores:
    """Per-class F1 = 2TP/(2TP+FP+FN) (0 when undefined), macro and support-weighted means.

    Arithmetic is exact over rationals so that equal supports give a weighted
    mean bit-identical to the macro mean.
    """
    c = cm.counts
    if c.sum() == 0:
        raise MetricError("empty confusion matrix")
    k = c.shape[0]
    per, zero = [], []
    for i in range(k):
        tp = int(c[i, i])
        fp = int(c[:, i].sum()) - tp
        fn = int(c[i, :].sum()) - tp
        den = 2 * tp + fp + fn
        if den == 0:
            zero.append(i)
            per.append(Fraction(0))
        else:
            per.append(Fraction(2 * tp, den))
    support = [int(c[i, :].sum()) for i in range(k)]
    macro = sum(per, Fraction(0)) / k
    weighted = sum((s * f for s, f in zip(support, per)), Fraction(0)) / sum(support)
    return F1Scores([float(f) for f in per], float(macro), float(weighted), zero)


@dataclass
class AucResult:
    macro: float
    per_class: list  # None for skipped classes
    skipped: list


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def binary_auc(is_pos: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    is_pos = np.asarray(is_pos, dtype=bool)
    n_pos = int(is_pos.sum())
    n_neg = len(is_pos) - n_pos
    ranks = _average_ranks(np.asarray(scores, dtype=np.float64))
    u = ranks[is_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc_ovr(y_true, scores) -> AucResult:
    """Macro one-vs-rest AUC over classes that have both positives and negatives."""
    y_true = np.asarray(y_true, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != len(y_true):
        raise MetricError(f"score matrix {scores.shape} does not match {len(y_true)} labels")
    per, skipped = [], []
    for k in range(scores.shape[1]):
        pos = y_true == k
        if pos.all() or not pos.any():
            per.append(None)
            skipped.append(k)
            continue
        per.append(binary_auc(pos, scores[:, k]))
    valid = [a for a in per if a is not None]
    if not valid:
        raise MetricError("no class has both positive and negative samples")
    return AucResult(math.fsum(valid) / len(valid), per, skipped)


# -- repeated runs ------------------------------------------------------------
@dataclass
class RunResult:
    """Metrics of one split/train/evaluate run."""
    f1_per_class: list
    f1_macro: float
    f1_weighted: float
    auc_ovr: float
    confusion: Optional[np.ndarray] = None

    @classmethod
    def from_predictions(cls, y_true, scores, n_classes: int) -> "RunResult":
        scores = np.asarray(scores)
        y_pred = np.argmax(scores, axis=1)
        cm = confusion(y_true, y_pred, n_classes)
        f1 = f1_scores(cm)
        return cls(f1.per_class, f1.macro, f1.weighted, auc_ovr(y_true, scores).macro, cm.counts)


@dataclass
class Stat:
    mean: float
    std: Optional[float] = None

    def format(self, digits: int = 3) -> str:
        if self.std is None:
            return f"{self.mean:.{digits}f}"
        return f"{self.mean:.{digits}f}±{self.std:.{digits}f}"

    def to_json(self) -> dict:
        return {"mean": self.mean} if self.std is None else {"mean": self.mean, "std": self.std}


def _stat(values: Sequence[float]) -> Stat:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 1:
        return Stat(float(v[0]))
    return Stat(math.fsum(v) / len(v), float(np.std(v, ddof=1)))


@dataclass
class MetricsReport:
    task: str
    classes: list
    runs: int
    f1_per_class: list
    f1_macro: Stat
    f1_weighted: Stat
    auc_ovr: Stat
    confusion_last_run: Optional[np.ndarray] = None
    config_digest: str = ""
    seeds: list = field(default_factory=list)

    def summary_lines(self) -> list[str]:
        lines = [f"task={self.task} runs={self.runs} (± is sample std over runs)",
                 f"f1_macro    {self.f1_macro.format()}",
                 f"f1_weighted {self.f1_weighted.format()}",
                 f"auc_ovr     {self.auc_ovr.format()}"]
        for name, s in zip(self.classes, self.f1_per_class):
            lines.append(f"  f1[{name}] {s.format()}")
        return lines

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "classes": list(self.classes),
            "runs": self.runs,
            "std_kind": "sample",
            "auc_kind": "macro_one_vs_rest",
            "metrics": {
                "f1_per_class": [s.to_json() for s in self.f1_per_class],
                "f1_macro": self.f1_macro.to_json(),
                "f1_weighted": self.f1_weighted.to_json(),
                "auc_ovr": self.auc_ovr.to_json(),
            },
            "confusion_last_run": [] if self.confusion_last_run is None
            else np.asarray(self.confusion_last_run).tolist(),
            "config_digest": self.config_digest,
        }


def repeated_runs(experiment: Callable[[int], RunResult], n_runs: int, base_seed: int = 0,
                  task: str = "", classes: Sequence[str] = (), config_digest: str = "") -> MetricsReport:
    """Run ``experiment(seed)`` for seeds ``base_seed .. base_seed + n_runs - 1`` and aggregate."""
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    results: dict[int, RunResult] = {}
    for r in range(n_runs):
        seed = base_seed + r
        try:
            results[seed] = experiment(seed)
        except Exception as exc:
            msg = f"run {r} (seed {seed}) failed: {exc}"
            try:
                wrapped = type(exc)(msg)
            except Exception:
                wrapped = RuntimeError(msg)
            raise wrapped from exc
    seeds = sorted(results)
    table = [results[s] for s in seeds]
    n_cls = len(table[0].f1_per_class)
    per_class = [_stat([t.f1_per_class[k] for t in table]) for k in range(n_cls)]
    names = list(classes) if classes else [str(k) for k in range(n_cls)]
    return MetricsReport(
        task=task, classes=names, runs=n_runs, f1_per_class=per_class,
        f1_macro=_stat([t.f1_macro for t in table]),
        f1_weighted=_stat([t.f1_weighted for t in table]),
        auc_ovr=_stat([t.auc_ovr for t in table]),
        confusion_last_run=table[-1].confusion, config_digest=config_digest, seeds=seeds,
    )


# -- export -------------------------------------------------------------------
_STAT_SCHEMA = {
    "type": "object",
    "properties": {"mean": {"type": "number", "minimum": 0, "maximum": 1},
                   "std": {"type": "number", "minimum": 0}},
    "required": ["mean"],
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["task", "classes", "runs", "metrics", "confusion_last_run", "config_digest"],
    "properties": {
        "task": {"type": "string"},
        "classes": {"type": "array", "items": {"type": "string"}},
        "runs": {"type": "integer", "minimum": 1},
        "std_kind": {"enum": ["sample"]},
        "auc_kind": {"enum": ["macro_one_vs_rest"]},
        "metrics": {
            "type": "object",
            "required": ["f1_per_class", "f1_macro", "f1_weighted", "auc_ovr"],
            "properties": {
                "f1_per_class": {"type": "array", "items": _STAT_SCHEMA},
                "f1_macro": _STAT_SCHEMA,
                "f1_weighted": _STAT_SCHEMA,
                "auc_ovr": _STAT_SCHEMA,
            },
            "additionalProperties": False,
        },
        "confusion_last_run": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "config_digest": {"type": "string"},
    },
    "additionalProperties": False,
}


def report_bytes(report: MetricsReport) -> bytes:
    return (json.dumps(report.to_json(), indent=2, sort_keys=False, ensure_ascii=False) + "\n").encode("utf-8")


def export_report(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(report_bytes(report))
    return path


def load_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:16]
