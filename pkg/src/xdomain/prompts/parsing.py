"""Extraction of the JSON payloads agents are asked to emit."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterator, Sequence

_FENCE_RE = re.compile(r"```(?:json|JSON)?[ \t]*\n?(.*?)```", re.DOTALL)
_TRAILING_COMMA_RE = re.compile(r",(\s*[\]}])")


class ParseError(ValueError):
    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class SchemaError(ParseError):
    pass


def _balanced_objects(text: str) -> Iterator[str]:
    """Yield every top-level ``{...}`` span, honouring JSON string escapes."""
    depth = 0
    start = -1
    in_str = False
    escaped = False
    for i, ch in enumerate(text):
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"' and depth > 0:
            in_str = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                yield text[start:i + 1]


def _strip_trailing_commas(s: str) -> str:
    # Only outside string literals.
    out = []
    in_str = escaped = False
    for i, ch in enumerate(s):
        if in_str:
            out.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch == ",":
            j = i + 1
            while j < len(s) and s[j].isspace():
                j += 1
            if j < len(s) and s[j] in "]}":
                continue
        out.append(ch)
    return "".join(out)


def _loads(candidate: str) -> Any:
    try:
        return json.loads(candidate)
    except json.JSONDecodeError:
        # The prompts' own format examples carry trailing commas, so models copy them.
        return json.loads(_strip_trailing_commas(candidate))


def extract_json_object(text: str) -> dict:
    """Fenced block first, then the first balanced top-level object that parses."""
    if not isinstance(text, str):
        raise ParseError("model output is not text", repr(text))
    candidates = [m.group(1).strip() for m in _FENCE_RE.finditer(text)]
    candidates += list(_balanced_objects(text))
    for cand in candidates:
        try:
            obj = _loads(cand)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise ParseError("no parseable JSON object in model output", text)


@dataclass(frozen=True)
class AgentEntry:
    judgment: str
    reason: str


@dataclass(frozen=True)
class AgentJsonResponse:
    entries: tuple[AgentEntry, ...]

    def to_dict(self) -> dict:
        return {"response": [{"judgment": e.judgment, "reason": e.reason} for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> AgentJsonResponse:
        return _validate_agent(d, json.dumps(d, ensure_ascii=False))


def _validate_agent(obj: dict, raw: str) -> AgentJsonResponse:
    entries = obj.get("response")
    if not isinstance(entries, list) or not entries:
        raise SchemaError('expected a non-empty "response" list', raw)
    out = []
    for e in entries:
        if not isinstance(e, dict):
            raise SchemaError("response entries must be objects", raw)
        judgment, reason = e.get("judgment"), e.get("reason")
        if not isinstance(judgment, str) or not judgment.strip():
            raise SchemaError('every entry needs a non-empty "judgment"', raw)
        if not isinstance(reason, str) or not reason.strip():
            raise SchemaError('every entry needs a non-empty "reason"', raw)
        out.append(AgentEntry(judgment, reason))
    return AgentJsonResponse(tuple(out))


def parse_agent_json(text: str) -> AgentJsonResponse:
    return _validate_agent(extract_json_object(text), text)


class Action(str, Enum):
    InnerThinking = "Inner Thinking"
    FinalConclusion = "Final Conclusion"
    Verification = "Verification"


_ACTION_ALIASES = {re.sub(r"[\s_-]", "", a.value).lower(): a for a in Action}


@dataclass(frozen=True)
class CotAction:
    action: Action
    content: str
    title: str | None = None

    def to_dict(self) -> dict:
        d: dict = {"action": self.action.value}
        if self.title is not None:
            d["title"] = self.title
        d["content"] = self.content
        return d


@dataclass(frozen=True)
class CotActionList:
    actions: tuple[CotAction, ...]

    def __iter__(self):
        return iter(self.actions)

    def __len__(self):
        return len(self.actions)

    def __add__(self, other: CotActionList) -> CotActionList:
        return CotActionList(self.actions + other.actions)

    def to_dict(self) -> dict:
        return {"CoT": [a.to_dict() for a in self.actions]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    def to_text(self) -> str:
        """Readable rendering used as the thought process for rephrasing."""
        parts = []
        for a in self.actions:
            heading = a.title if a.action is Action.InnerThinking and a.title else a.action.value
            parts.append(f"### {heading}\n{a.content}")
        return "\n\n".join(parts)

    @classmethod
    def from_dict(cls, d: dict) -> CotActionList:
        return _validate_cot(d, json.dumps(d, ensure_ascii=False))

    @classmethod
    def concat(cls, chains: Sequence[CotActionList]) -> CotActionList:
        return cls(tuple(a for c in chains for a in c.actions))


def _validate_cot(obj: dict, raw: str) -> CotActionList:
    steps = obj.get("CoT")
    if not isinstance(steps, list) or not steps:
        raise SchemaError('expected a non-empty "CoT" list', raw)
    actions = []
    for step in steps:
        if not isinstance(step, dict):
            raise SchemaError("CoT steps must be objects", raw)
        name = step.get("action")
        key = re.sub(r"[\s_-]", "", name).lower() if isinstance(name, str) else None
        if key not in _ACTION_ALIASES:
            raise SchemaError(f"unknown CoT action {name!r}", raw)
        content = step.get("content")
        if not isinstance(content, str) or not content.strip():
            raise SchemaError(f"{name} step has no content", raw)
        title = step.get("title")
        actions.append(CotAction(_ACTION_ALIASES[key], content, title if isinstance(title, str) else None))
    if not any(a.action is Action.FinalConclusion for a in actions):
        raise SchemaError("CoT has no Final Conclusion", raw)
    return CotActionList(tuple(actions))


def parse_summary_cot(text: str) -> CotActionList:
    return _validate_cot(extract_json_object(text), text)


def final_answer_of(cot: CotActionList) -> str:
    """Content of the last Final Conclusion; later conclusions supersede earlier ones."""
    for a in reversed(cot.actions):
        if a.action is Action.FinalConclusion:
            return a.content
    raise SchemaError("CoT has no Final Conclusion")


def parse_natural_reasoning(text: str) -> str:
    obj = extract_json_object(text)
    value = obj.get("NaturalReasoning")
    if not isinstance(value, str) or not value.strip():
        raise SchemaError('expected a non-empty "NaturalReasoning" string', text)
    return value
