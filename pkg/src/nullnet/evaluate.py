"""Metrics: test accuracy, substitute success rate, transferability.

A NULL answer is never a success. On clean data it is a wrong prediction;
for a transferred example it is a failed attack, in either mode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attacks import AdversarialResult
from .data import Dataset

MISCLASSIFICATION = "misclassification"
TARGETED = "targeted"


@dataclass
class EvaluationReport:
    metric_name: str
    numerator: int
    denominator: int
    breakdown: dict[float, tuple[int, int]] = field(default_factory=dict)
    mode: str = MISCLASSIFICATION

    def __post_init__(self):
        if self.denominator <= 0:
            raise ValueError(f"{self.metric_name}: denominator must be positive")
        if not 0 <= self.numerator <= self.denominator:
            raise ValueError(f"{self.metric_name}: numerator outside [0, denominator]")

    @property
    def value(self) -> float:
        return self.numerator / self.denominator

    def at(self, epsilon: float) -> float:
        num, den = self.breakdown[epsilon]
        return num / den if den else float("nan")

    def rows(self) -> list[tuple]:
        """(metric, epsilon, numerator, denominator, value); epsilon "all" is the total."""
        out = [(self.metric_name, eps, n, d, n / d if d else float("nan"))
               for eps, (n, d) in sorted(self.breakdown.items())]
        out.append((self.metric_name, "all", self.numerator, self.denominator, self.value))
        return out


CSV_HEADER = ("metric", "epsilon", "numerator", "denominator", "value")


def _fmt(v) -> str:
    return f"{v:.9g}" if isinstance(v, float) else str(v)


def write_reports_csv(reports: Sequence[EvaluationReport], path,
                      extra_rows: Sequence[tuple] = ()) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for rep in reports:
            for row in rep.rows():
                w.writerow([_fmt(v) for v in row])
        for row in extra_rows:
            w.writerow([_fmt(v) for v in row])


def read_reports_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def format_table(rows: Sequence[tuple[str, float]], title: str = "") -> str:
    """Two-column plain-text table: name, percentage."""
    width = max([len(name) for name, _ in rows] + [len("Classifier")])
    lines = [title] if title else []
    lines.append(f"{'Classifier':<{width}}  Accuracy")
    lines.append("-" * (width + 10))
    lines += [f"{name:<{width}}  {100 * acc:7.2f}%" for name, acc in rows]
    return "\n".join(lines)


def test_accuracy(classifier, test_set: Dataset, name: str = "test_accuracy") -> EvaluationReport:
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    pred = np.concatenate([np.atleast_1d(classifier.predict(test_set.X[i:i + 2048]))
                           for i in range(0, len(test_set), 2048)])
    return EvaluationReport(name, int(np.sum(pred == test_set.y)), len(test_set))


test_accuracy.__test__ = False  # not a pytest test despite the name


def _by_epsilon(results: Sequence[AdversarialResult]) -> dict[float, list[int]]:
    groups: dict[float, list[int]] = {}
    for i, r in enumerate(results):
        groups.setdefault(r.epsilon, []).append(i)
    return groups


def substitute_success_rate(results: Sequence[AdversarialResult],
                            attempts: int | Mapping[float, int],
                            name: str = "substitute_success_rate") -> EvaluationReport:
    """Feasible results over attempted samples.

    ``attempts`` is either a total or a per-epsilon map; the per-epsilon
    breakdown is only available with the latter.
    """
    feasible = [r for r in results if r.feasible]
    if isinstance(attempts, Mapping):
        total = int(sum(attempts.values()))
        groups = _by_epsilon(feasible)
        breakdown = {}
        for eps, att in attempts.items():
            n = len(groups.get(eps, ()))
            if n > att:
                raise ValueError(f"more results than attempts at epsilon {eps}")
            breakdown[eps] = (n, int(att))
    else:
        total = int(attempts)
        breakdown = {}
    if total <= 0:
        raise ValueError("attempts must be positive")
    if len(feasible) > total:
        raise ValueError("more results than attempts")
    return EvaluationReport(name, len(feasible), total, breakdown)


def _labels_from_target(target, X: np.ndarray) -> np.ndarray:
    if hasattr(target, "query_batch"):
        return np.asarray(target.query_batch(X), dtype=np.int64)
    return np.concatenate([np.atleast_1d(target.predict(X[i:i + 2048]))
                           for i in range(0, len(X), 2048)]).astype(np.int64)


def transfer_outcomes(labels: np.ndarray, transfer_set: Sequence[AdversarialResult],
                      mode: str, target_labels: Sequence[int] | None,
                      null_label: int | None) -> np.ndarray:
    """Per-example success flags given the target's answers."""
    labels = np.asarray(labels, dtype=np.int64)
    is_null = labels == null_label if null_label is not None else np.zeros(len(labels), bool)
    if mode == MISCLASSIFICATION:
        orig = np.array([r.original_label for r in transfer_set], dtype=np.int64)
        return (labels != orig) & ~is_null
    if mode == TARGETED:
        tgt = np.asarray(target_labels, dtype=np.int64)
        if len(tgt) != len(labels):
            raise ValueError("one target label per transferred example is required")
        return (labels == tgt) & ~is_null
    raise ValueError(f"unknown mode {mode!r}")


def transfer_reports(target, transfer_set: Sequence[AdversarialResult],
                     mode: str = MISCLASSIFICATION,
                     target_labels: Sequence[int] | None = None,
                     null_label: int | None = None,
                     epsilons: Sequence[float] = ()) -> tuple[EvaluationReport, EvaluationReport]:
    """Transferability and NULL fraction from a single pass over the target.

    ``target`` is an oracle (``query_batch``) or a classifier (``predict``).
    Its NULL label comes from ``null_label``, ``target.null_label`` or
    ``target.null_index``, in that order. Every value in ``epsilons`` gets a
    breakdown entry even when no example was generated at it.
    """
    if mode not in (MISCLASSIFICATION, TARGETED):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == TARGETED and target_labels is None:
        target_labels = [r.target_label for r in transfer_set]
        if any(t is None for t in target_labels):
            raise ValueError("targeted mode needs target labels")
    if not transfer_set:
        raise ValueError("transfer set is empty")
    if null_label is None:
        null_label = getattr(target, "null_label", getattr(target, "null_index", None))
    labels = _labels_from_target(target, np.stack([r.x_star for r in transfer_set]))
    ok = transfer_outcomes(labels, transfer_set, mode, target_labels, null_label)
    hit = labels == null_label if null_label is not None else np.zeros(len(labels), bool)
    groups = _by_epsilon(transfer_set)
    rate = {float(e): (0, 0) for e in epsilons}
    nulls = dict(rate)
    for eps, idx in groups.items():
        rate[eps] = (int(ok[idx].sum()), len(idx))
        nulls[eps] = (int(hit[idx].sum()), len(idx))
    return (EvaluationReport("transferability_rate", int(ok.sum()), len(ok), rate, mode),
            EvaluationReport("null_fraction", int(hit.sum()), len(hit), nulls, mode))


def transferability_rate(target, transfer_set: Sequence[AdversarialResult],
                         mode: str = MISCLASSIFICATION,
                         target_labels: Sequence[int] | None = None,
                         null_label: int | None = None) -> EvaluationReport:
    """Share of substitute-feasible examples that also fool ``target``."""
    return transfer_reports(target, transfer_set, mode, target_labels, null_label)[0]
