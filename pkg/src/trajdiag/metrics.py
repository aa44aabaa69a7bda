"""Scoring evaluator predictions against gold labels.

Task success is the positive class throughout. Metrics are stored as
percentages at full float precision; renderings round to 2 decimal places.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any

logger = logging.getLogger(__name__)


class EmptyInputError(ValueError):
    """No (predicted, gold) pairs to score."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion-matrix counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[bool, bool]]) -> "ConfusionMatrix":
        tp = fp = fn = tn = 0
        for predicted, gold in pairs:
            if predicted and gold:
                tp += 1
            elif predicted and not gold:
                fp += 1
            elif not predicted and gold:
                fn += 1
            else:
                tn += 1
        return cls(tp=tp, fp=fp, fn=fn, tn=tn)


@dataclass(frozen=True)
class MetricsSummary:
    matrix: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "matrix": {
                "tp": self.matrix.tp,
                "fp": self.matrix.fp,
                "fn": self.matrix.fn,
                "tn": self.matrix.tn,
            },
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def f1_from_precision_recall(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall <= 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_metrics(pairs: Sequence[tuple[bool, bool]]) -> MetricsSummary:
    """Accuracy/Precision/Recall/F1 over (predicted, gold) pairs, in percent."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyInputError("no (predicted, gold) pairs to score")
    matrix = ConfusionMatrix.from_pairs(pairs)
    if matrix.tp + matrix.fp == 0:
        logger.warning("no positive predictions; precision defined as 0")
        precision = 0.0
    else:
        precision = 100.0 * matrix.tp / (matrix.tp + matrix.fp)
    if matrix.tp + matrix.fn == 0:
        logger.warning("no positive gold labels; recall and F1 defined as 0")
        recall = 0.0
    else:
        recall = 100.0 * matrix.tp / (matrix.tp + matrix.fn)
    accuracy = 100.0 * (matrix.tp + matrix.tn) / matrix.total
    return MetricsSummary(
        matrix=matrix,
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1_from_precision_recall(precision, recall),
    )


class LengthGroup(str, Enum):
    LT10 = "lt10"
    G10_20 = "g10_20"
    G20_30 = "g20_30"
    G30_40 = "g30_40"
    G40_50 = "g40_50"
    G50_80 = "g50_80"
    OVERFLOW = "overflow"


GROUP_LABELS = {
    LengthGroup.LT10: "<10",
    LengthGroup.G10_20: "10-20",
    LengthGroup.G20_30: "20-30",
    LengthGroup.G30_40: "30-40",
    LengthGroup.G40_50: "40-50",
    LengthGroup.G50_80: "50-80",
    LengthGroup.OVERFLOW: ">80",
}

# Canonical display order (enum declaration order, shortest first).
_GROUP_INDEX = {group: position for position, group in enumerate(LengthGroup)}


def group_of_length(n: int) -> LengthGroup:
    """Bucket a trajectory length. Bins are [1,10), [10,20), [20,30),
    [30,40), [40,50), and [50,80] inclusive; anything above 80 overflows.
    """
    if n < 1:
        raise ValueError(f"trajectory length must be >= 1, got {n}")
    if n < 10:
        return LengthGroup.LT10
    if n < 20:
        return LengthGroup.G10_20
    if n < 30:
        return LengthGroup.G20_30
    if n < 40:
        return LengthGroup.G30_40
    if n < 50:
        return LengthGroup.G40_50
    if n <= 80:
        return LengthGroup.G50_80
    return LengthGroup.OVERFLOW


@dataclass(frozen=True)
class GroupedMetrics:
    overall: MetricsSummary
    by_group: dict[LengthGroup, MetricsSummary]
    omitted_groups: tuple[LengthGroup, ...]
    excluded_missing_gold: int
    excluded_evaluator_errors: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "overall": self.overall.to_dict(),
            "by_group": {g.value: m.to_dict() for g, m in self.by_group.items()},
            "omitted_groups": [g.value for g in self.omitted_groups],
            "excluded_missing_gold": self.excluded_missing_gold,
            "excluded_evaluator_errors": self.excluded_evaluator_errors,
        }


def metrics_by_group(
    reports: Iterable[Any],
    dataset: Any,
    *,
    exclude_errors: bool = False,
) -> GroupedMetrics:
    """Per-length-group metrics plus overall.

    ``reports`` need task_id, final.success, and evaluator_error attributes;
    ``dataset`` needs get(task_id) returning an item with gold_label and
    trajectory.length. Items without a gold label are excluded and counted;
    with exclude_errors, evaluator-error reports are excluded and counted.
    """
    pairs_by_group: dict[LengthGroup, list[tuple[bool, bool]]] = defaultdict(list)
    all_pairs: list[tuple[bool, bool]] = []
    skipped_gold = 0
    skipped_errors = 0
    for report in reports:
        item = dataset.get(report.task_id)
        if exclude_errors and report.evaluator_error:
            skipped_errors += 1
            continue
        if item.gold_label is None:
            skipped_gold += 1
            continue
        pair = (report.final.success, item.gold_label)
        all_pairs.append(pair)
        pairs_by_group[group_of_length(item.trajectory.length)].append(pair)
    overall = compute_metrics(all_pairs)
    by_group = {
        group: compute_metrics(group_pairs)
        for group, group_pairs in sorted(
            pairs_by_group.items(), key=lambda kv: _GROUP_INDEX[kv[0]]
        )
    }
    omitted = tuple(g for g in LengthGroup if g not in by_group)
    return GroupedMetrics(
        overall=overall,
        by_group=by_group,
        omitted_groups=omitted,
        excluded_missing_gold=skipped_gold,
        excluded_evaluator_errors=skipped_errors,
    )


def cohen_kappa(a: Sequence[Any], b: Sequence[Any]) -> float:
    """Chance-corrected agreement between two raters over categorical labels.

    kappa = (p_o - p_e) / (1 - p_e), where p_o is the observed agreement
    rate and p_e the chance agreement implied by the two raters' marginal
    label distributions. With degenerate marginals (p_e = 1, both raters
    stuck on one shared label) the formula is undefined; returns 1 for
    perfect agreement and 0 otherwise, with a warning.
    """
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        raise ValueError(f"label lists differ in length: {len(a)} vs {len(b)}")
    if not a:
        raise ValueError("empty label lists")
    n = len(a)
    p_observed = sum(x == y for x, y in zip(a, b)) / n
    labels = sorted(set(a) | set(b), key=repr)
    p_expected = sum((a.count(label) / n) * (b.count(label) / n) for label in labels)
    if p_expected >= 1.0:
        logger.warning("degenerate marginals: chance agreement is 1; kappa forced")
        return 1.0 if p_observed >= 1.0 else 0.0
    return (p_observed - p_expected) / (1.0 - p_expected)
