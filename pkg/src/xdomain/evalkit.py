"""Label extraction from raw outputs, macro metrics, domain difficulty ranking
and per-domain class balancing."""

from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import dataclass, field
from statistics import fmean
from typing import Iterable, Mapping, Sequence

from .prompts import TaskSpec
from .rewards import extract_label
from .vectorspace import LabeledItem

UNPARSED_POLICIES = ("wrong", "drop")


class AlignmentError(ValueError):
    """Prediction and gold item ids do not line up."""


@dataclass(frozen=True)
class Prediction:
    item_id: str
    raw_output: str
    label: str | None = None

    @classmethod
    def from_output(cls, item_id: str, raw_output: str, task: TaskSpec) -> Prediction:
        return cls(item_id, raw_output, extract_label(raw_output, task))

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "raw_output": self.raw_output, "label": self.label}


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: tuple[tuple[int, ...], ...]  # rows gold, columns predicted
    unparsed: int = 0
    # Unparsed predictions per gold class, kept so recall can count them as misses.
    unparsed_by_gold: tuple[int, ...] = ()

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts)) + self.unparsed

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": [list(r) for r in self.counts], "unparsed": self.unparsed}


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    per_class: dict[str, ClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    n: int
    unparsed: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "n": self.n,
            "unparsed": self.unparsed,
            "per_class": {c: vars(m) for c, m in self.per_class.items()},
        }

    def table(self, name: str = "model", digits: int = 3) -> str:
        return format_table({name: self}, digits)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return _ratio(2 * p * r, p + r)


def _labels_by_id(predictions: Sequence[Prediction], golds: Mapping[str, str]) -> list[tuple[str, str | None]]:
    pred_ids = [p.item_id for p in predictions]
    if len(set(pred_ids)) != len(pred_ids):
        raise AlignmentError("duplicate item_id among predictions")
    if set(pred_ids) != set(golds):
        missing = sorted(set(golds) - set(pred_ids))[:5]
        extra = sorted(set(pred_ids) - set(golds))[:5]
        raise AlignmentError(f"prediction/gold ids differ (missing {missing}, unexpected {extra})")
    return [(golds[p.item_id], p.label) for p in predictions]


def confusion(pairs: Iterable[tuple[str, str | None]], classes: Sequence[str],
              unparsed_policy: str = "wrong") -> ConfusionMatrix:
    if unparsed_policy not in UNPARSED_POLICIES:
        raise ValueError(f"unparsed_policy must be one of {UNPARSED_POLICIES}")
    idx = {c: i for i, c in enumerate(classes)}
    counts = [[0] * len(classes) for _ in classes]
    missed = [0] * len(classes)
    unparsed = 0
    for gold, pred in pairs:
        if gold not in idx:
            raise ValueError(f"gold label {gold!r} is not one of {list(classes)}")
        if pred is None:
            if unparsed_policy == "wrong":
                unparsed += 1
                missed[idx[gold]] += 1
            continue
        if pred not in idx:
            raise ValueError(f"predicted label {pred!r} is not canonical")
        counts[idx[gold]][idx[pred]] += 1
    return ConfusionMatrix(tuple(classes), tuple(map(tuple, counts)), unparsed, tuple(missed))


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    k = len(cm.classes)
    missed = cm.unparsed_by_gold or (0,) * k
    per_class = {}
    for i, c in enumerate(cm.classes):
        tp = cm.counts[i][i]
        predicted = sum(cm.counts[r][i] for r in range(k))
        support = sum(cm.counts[i]) + missed[i]
        p, r = _ratio(tp, predicted), _ratio(tp, support)
        per_class[c] = ClassMetrics(p, r, _f1(p, r), support)
    n = cm.total
    correct = sum(cm.counts[i][i] for i in range(k))
    return MetricsReport(
        accuracy=_ratio(correct, n),
        per_class=per_class,
        macro_precision=fmean(m.precision for m in per_class.values()),
        macro_recall=fmean(m.recall for m in per_class.values()),
        macro_f1=fmean(m.f1 for m in per_class.values()),
        n=n,
        unparsed=cm.unparsed,
    )


def score(predictions: Sequence[Prediction], golds: Mapping[str, str], task: TaskSpec,
          unparsed_policy: str = "wrong") -> tuple[ConfusionMatrix, MetricsReport]:
    """Accuracy and macro P/R/F1 over the task's label set.

    Under the default policy an unparsed prediction is a miss for its gold
    class and is predicted as no class at all; ``"drop"`` removes it.
    """
    cm = confusion(_labels_by_id(predictions, golds), task.label_set, unparsed_policy)
    return cm, metrics_from_confusion(cm)


def format_table(reports: Mapping[str, MetricsReport], digits: int = 3) -> str:
    header = ("Model", "ACC", "Pre", "Recall", "F1")
    rows = [header] + [
        (name, *(f"{v:.{digits}f}" for v in (r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1)))
        for name, r in reports.items()
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for row in rows:
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def format_per_class(report: MetricsReport, digits: int = 3) -> str:
    rows = [("Class", "Pre", "Recall", "F1", "Support")] + [
        (c, f"{m.precision:.{digits}f}", f"{m.recall:.{digits}f}", f"{m.f1:.{digits}f}", str(m.support))
        for c, m in report.per_class.items()
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    return "\n".join("  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])])
                     for r in rows)


def rank_domain_difficulty(per_domain: Mapping[str, Sequence[MetricsReport | float]]) -> list[tuple[str, float]]:
    """Domains from hardest to easiest by mean macro F1 across judge models."""
    if not per_domain:
        raise ValueError("no domains to rank")
    ranked = []
    for domain, reports in per_domain.items():
        if not reports:
            raise ValueError(f"domain {domain!r} has no reports")
        f1s = [r.macro_f1 if isinstance(r, MetricsReport) else float(r) for r in reports]
        ranked.append((domain, fmean(f1s)))
    ranked.sort(key=lambda t: (t[1], t[0]))
    return ranked


def balance_classes(items: Sequence[LabeledItem], seed: int) -> list[LabeledItem]:
    """Downsample every class in each domain to that domain's minority count.

    Output keeps the input order of the surviving items.
    """
    groups: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for i, it in enumerate(items):
        groups[it.domain][it.label].append(i)
    keep: set[int] = set()
    for domain in sorted(groups):
        by_label = groups[domain]
        floor = min(len(v) for v in by_label.values())
        for label in sorted(by_label):
            rng = random.Random(f"{seed}:{domain}:{label}")
            keep.update(rng.sample(by_label[label], floor))
    return [it for i, it in enumerate(items) if i in keep]


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    report: MetricsReport
    predictions: list[Prediction] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"confusion": self.confusion.to_dict(), "metrics": self.report.to_dict()},
                          ensure_ascii=False, sort_keys=True, indent=2)
