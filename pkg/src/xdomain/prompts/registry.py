"""Template registry, task vocabularies and slot rendering."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

from ..vectorspace import Neighbor, RetrievedContext

SLOT_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")


class TemplateError(KeyError):
    def __str__(self):  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class MissingSlotError(TemplateError):
    pass


class UnknownSlotError(TemplateError):
    pass


class TemplateId(str, Enum):
    zero_shot = "zero_shot"
    few_shot_ra = "few_shot_ra"
    sft_record = "sft_record"
    sub_init_sentiment = "sub_init_sentiment"
    sub_init_semantic = "sub_init_semantic"
    sub_init_style = "sub_init_style"
    sub_double_check = "sub_double_check"
    sub_communication = "sub_communication"
    sub_hint = "sub_hint"
    sum_init = "sum_init"
    sum_consolidation = "sum_consolidation"
    sum_reconsideration = "sum_reconsideration"
    sum_diversification = "sum_diversification"
    sum_verification = "sum_verification"
    sum_rectification = "sum_rectification"
    sum_hint = "sum_hint"
    verify = "verify"
    rephrase = "rephrase"
    refine = "refine"


@dataclass(frozen=True)
class TaskSpec:
    name: str
    label_set: tuple[str, ...]
    task_description: str
    # How a label is shown inside retrieved-example lines; defaults to the label itself.
    display_labels: Mapping[str, str] = field(default_factory=dict)

    def display(self, label: str) -> str:
        return self.display_labels.get(label, label)

    def __contains__(self, label: str) -> bool:
        return label in self.label_set


TASKS: dict[str, TaskSpec] = {
    "AMTCele": TaskSpec(
        "AMTCele",
        ("fake", "legit"),
        "Determine whether the target text is fake or legit.",
    ),
    "PHEME": TaskSpec(
        "PHEME",
        ("rumour", "non-rumour"),
        "Classify the target text as rumour or non-rumour.",
    ),
    "COCO": TaskSpec(
        "COCO",
        ("Unrelated", "Related", "Conspiracy"),
        "Determine whether the target text is Unrelated, Related, or Conspiracy. Unrelated means the text "
        "contains conspiracy-related keywords but uses them in an unrelated or different context. Related "
        "means the text is conspiracy-related but does not propagate conspiracy misinformation. Conspiracy "
        "means the text is conspiracy-related and actively propagates or supports the misinformation.",
        {"Related": "Related (but not supporting)", "Conspiracy": "Conspiracy (related and supporting)"},
    ),
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; expected one of {sorted(TASKS)}") from None


# Persona paragraph shared by every prompt a sub-agent receives.
ROLES = {
    "sentiment": (
        "You are an expert in sentiment analysis. You need to collaborate with a semantic analysis expert and a "
        "writing style analysis expert to address the above problem. Your primary responsibility is the sentiment "
        "analysis component. Respond to the question from the perspective of sentiment analysis, incorporating "
        "retrieved examples. Provide your judgment along with well-reasoned evidence or explanations."
    ),
    "semantic": (
        "You are an expert in semantic analysis. You need to collaborate with a sentiment analysis expert and a "
        "writing style analysis expert to address the above problem. Your primary responsibility is the semantic "
        "analysis component. Respond to the question from the perspective of semantic analysis, incorporating "
        "retrieved examples. Provide your judgment along with well-reasoned evidence or explanations."
    ),
    "style": (
        "You are an expert in writing style analysis. You need to collaborate with a sentiment analysis expert and "
        "a semantic analysis expert to address the above problem. Your primary responsibility is the writing style "
        "analysis component. Respond to the question from the perspective of writing style analysis, incorporating "
        "retrieved examples. Provide your judgment along with well-reasoned evidence or explanations."
    ),
}

EXPERTISE = {"sentiment": "sentiment analysis", "semantic": "semantic analysis", "style": "writing style analysis"}

HEADINGS = {
    "sentiment": "Here are a few examples retrieved through sentiment intensity:",
    "semantic": "Here are a few examples retrieved through semantic information:",
    "style": "Here are a few examples retrieved through writing style information:",
}


@lru_cache(maxsize=None)
def template_body(template: TemplateId | str) -> str:
    tid = TemplateId(template)
    text = resources.files(__package__).joinpath("templates", f"{tid.value}.txt").read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


@lru_cache(maxsize=None)
def template_slots(template: TemplateId | str) -> frozenset[str]:
    return frozenset(SLOT_RE.findall(template_body(template)))


def render(template: TemplateId | str, slots: Mapping[str, str]) -> str:
    """Substitute ``{name}`` markers in a single pass.

    Slot values are inserted literally; braces inside them are never
    re-expanded.
    """
    tid = TemplateId(template)
    required = template_slots(tid)
    missing = required - slots.keys()
    if missing:
        raise MissingSlotError(f"{tid.value}: missing slot(s) {sorted(missing)}")
    extra = slots.keys() - required
    if extra:
        raise UnknownSlotError(f"{tid.value}: unknown slot(s) {sorted(extra)}")
    return SLOT_RE.sub(lambda m: str(slots[m.group(1)]), template_body(tid))


def format_examples(neighbors: Sequence[Neighbor], task: TaskSpec) -> str:
    # Similarity scores stay out of prompts; only texts and labels are shown.
    return "\n".join(
        f"Text{i}: {n.item.text}. The label of this text: {task.display(n.item.label)}."
        for i, n in enumerate(neighbors, start=1)
    )


def render_x_ra(ctx: RetrievedContext, task: TaskSpec | None = None) -> str:
    """The retrieval-augmented input shown to the summary agent and stored in training records."""
    task = task or get_task(ctx.task)
    return render(
        TemplateId.few_shot_ra,
        {
            "task_description": task.task_description,
            "target_text": ctx.target.text,
            "sentiment_examples": format_examples(ctx.neighbors.get("sentiment", ()), task),
            "semantic_examples": format_examples(ctx.neighbors.get("semantic", ()), task),
            "style_examples": format_examples(ctx.neighbors.get("style", ()), task),
        },
    )


def render_zero_shot(ctx: RetrievedContext, task: TaskSpec | None = None) -> str:
    task = task or get_task(ctx.task)
    return render(TemplateId.zero_shot, {"task_description": task.task_description, "target_text": ctx.target.text})


def perspective_block(ctx: RetrievedContext, perspective: str, task: TaskSpec | None = None) -> str:
    task = task or get_task(ctx.task)
    return f"{HEADINGS[perspective]}\n{format_examples(ctx.neighbors.get(perspective, ()), task)}"


def render_sub_question(ctx: RetrievedContext, perspective: str, task: TaskSpec | None = None) -> str:
    """Task + target + only this perspective's retrieved examples."""
    task = task or get_task(ctx.task)
    return f"{render_zero_shot(ctx, task)}\n\n{perspective_block(ctx, perspective, task)}"


def render_sft(think: str, answer: str) -> str:
    return render(TemplateId.sft_record, {"think": think, "answer": answer})
