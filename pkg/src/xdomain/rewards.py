"""Rule-based format and accuracy rewards, the canonical label matcher, and
RL record emission."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .prompts import TaskSpec, get_task, render_x_ra
from .vectorspace import RetrievedContext

FORMAT_RE = re.compile(r"<think>\n(.+)\n</think>\n\n<answer>\n(.+)\n\n(.+)</answer>\s*", re.DOTALL)
_SENTENCE_END_RE = re.compile(r"[.!?\n]")

ACCURACY_CORRECT = 1.0
ACCURACY_WRONG = 0.1
ACCURACY_NONE = 0.0


def _label_pattern(label: str) -> re.Pattern:
    parts = [re.escape(p) for p in re.split(r"[-\s]+", label)]
    if len(parts) == 1:
        return re.compile(parts[0], re.IGNORECASE)
    # "non-rumour", "non rumour" and "nonrumour" are the same label.
    return re.compile(r"[-\s]?".join(parts), re.IGNORECASE)


def find_labels(text: str, task: TaskSpec) -> list[str]:
    """Canonical labels mentioned in ``text``, longest label claiming its span first.

    A shorter label found inside an already-claimed span (``rumour`` inside
    ``non-rumour``, ``Related`` inside ``Unrelated``) is not counted.
    """
    claimed: list[tuple[int, int]] = []
    found: list[str] = []
    for label in sorted(task.label_set, key=lambda s: (-len(s), s)):
        for m in _label_pattern(label).finditer(text):
            s, e = m.span()
            if any(s < ce and cs < e for cs, ce in claimed):
                continue
            claimed.append((s, e))
            if label not in found:
                found.append(label)
    return found


def first_sentence(text: str) -> str:
    text = text.lstrip()
    m = _SENTENCE_END_RE.search(text)
    return text if m is None else text[:m.start()]


def match_label(text: str, task: TaskSpec) -> str | None:
    """The unique canonical label in ``text``; None when absent or ambiguous."""
    labels = find_labels(text, task)
    return labels[0] if len(labels) == 1 else None


def extract_label(text: str, task: TaskSpec) -> str | None:
    """Unique canonical label stated in the first sentence, else None."""
    return match_label(first_sentence(text), task)


@dataclass(frozen=True)
class FormatMatch:
    score: int
    think: str | None = None
    answer: str | None = None  # full answer body, first paragraph + response


def format_reward(output: str) -> FormatMatch:
    m = FORMAT_RE.fullmatch(output or "")
    if m is None:
        return FormatMatch(0)
    return FormatMatch(1, m.group(1), f"{m.group(2)}\n\n{m.group(3)}")


@dataclass(frozen=True)
class RewardScore:
    format: int
    accuracy: float
    extracted_label: str | None
    first_sentence: str

    @property
    def total(self) -> float:
        # Unweighted sum; the two components are also reported separately.
        return self.format + self.accuracy

    def to_dict(self) -> dict:
        return {"format": self.format, "accuracy": self.accuracy, "extracted_label": self.extracted_label}


def score_output(output: str, gold: str, task: TaskSpec) -> RewardScore:
    fmt = format_reward(output)
    segment = fmt.answer if fmt.score else (output or "")
    sentence = first_sentence(segment)
    label = match_label(sentence, task)
    if label is None:
        acc = ACCURACY_NONE
    elif label == gold:
        acc = ACCURACY_CORRECT
    else:
        acc = ACCURACY_WRONG
    return RewardScore(fmt.score, acc, label, sentence)


def accuracy_reward(output: str, gold: str, task: TaskSpec) -> float:
    return score_output(output, gold, task).accuracy


@dataclass(frozen=True)
class RlRecord:
    input: str
    gold_label: str

    def to_dict(self) -> dict:
        return {"input": self.input, "gold_label": self.gold_label}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> RlRecord:
        return cls(input=str(d["input"]), gold_label=str(d["gold_label"]))


def emit_rl(contexts: Iterable[RetrievedContext], task: TaskSpec | None = None) -> list[RlRecord]:
    records = []
    for ctx in contexts:
        item_task = task or get_task(ctx.task)
        if ctx.target.label not in item_task:
            raise ValueError(f"gold label {ctx.target.label!r} of {ctx.item_id!r} not in {item_task.name} label set")
        records.append(RlRecord(render_x_ra(ctx, item_task), ctx.target.label))
    return records


def score_batch(rows: Sequence[dict], task: TaskSpec) -> list[RewardScore]:
    return [score_output(r["output"], r["gold_label"], task) for r in rows]
