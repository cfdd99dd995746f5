"""Multi-agent reasoning-path search.

Three perspective sub-agents judge a retrieval-augmented item, a summary
agent folds their judgments into a structured chain of thought, and a
verifier checks the candidate against the gold label.  Failed candidates go
through up to ``max_rounds`` strategy rounds, then one hint round.  Solved
paths are rephrased into natural reasoning and refined into a final answer.
"""

from __future__ import annotations

import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

from .llm_client import CallRecord, CallTag, ChatClient, ChatMessage, GenerationParams, LLMError
from .prompts import (
    EXPERTISE,
    ROLES,
    AgentJsonResponse,
    CotActionList,
    ParseError,
    SchemaError,
    TaskSpec,
    TemplateId,
    final_answer_of,
    get_task,
    parse_agent_json,
    parse_natural_reasoning,
    parse_summary_cot,
    perspective_block,
    render,
    render_sft,
    render_sub_question,
    render_x_ra,
)
from .rewards import extract_label, match_label
from .vectorspace import RetrievedContext

log = logging.getLogger(__name__)

SUB_AGENTS = ("sentiment", "semantic", "style")
SUB_STRATEGIES = ("DoubleCheck", "Communication")
SUMMARY_STRATEGIES = ("Consolidation", "Reconsideration", "Diversification", "Verification", "Rectification")
HINT = "Hint"
VERIFIER_MODES = ("exact_match", "llm", "llm_with_exact_fallback")

JSON_REASK = "Your previous output was not valid JSON; reply with only the JSON object."
ANSWER_REASK = (
    "Your previous response did not follow the required shape. Start with one sentence that states exactly "
    "one of these labels: {labels}. Then leave a blank line and give the explanation in a second paragraph."
)
SENTINELS = ("<think>", "</think>", "<answer>", "</answer>")

_SUMMARY_TEMPLATES = {
    None: TemplateId.sum_init,
    "Consolidation": TemplateId.sum_consolidation,
    "Reconsideration": TemplateId.sum_reconsideration,
    "Diversification": TemplateId.sum_diversification,
    "Verification": TemplateId.sum_verification,
    "Rectification": TemplateId.sum_rectification,
    HINT: TemplateId.sum_hint,
}


class AgentFailure(RuntimeError):
    """An agent step could not produce usable output; the item is aborted."""


class VerifierAmbiguousError(AgentFailure):
    pass


@dataclass(frozen=True)
class SearchConfig:
    max_rounds: int = 3
    rng_seed: int = 0
    verifier_mode: str = "llm_with_exact_fallback"
    include_hint_records: bool = True
    params: GenerationParams = field(default_factory=GenerationParams)

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.verifier_mode not in VERIFIER_MODES:
            raise ValueError(f"verifier_mode must be one of {VERIFIER_MODES}")


@dataclass(frozen=True)
class SubOutput:
    response: AgentJsonResponse
    answer: str | None

    def to_dict(self) -> dict:
        return {"response": self.response.to_dict(), "answer": self.answer}

    @classmethod
    def from_dict(cls, d: dict) -> SubOutput:
        return cls(AgentJsonResponse.from_dict(d["response"]), d.get("answer"))


@dataclass(frozen=True)
class SummaryStep:
    strategy: str | None
    cot: CotActionList
    candidate: str
    verdict: bool

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "cot": self.cot.to_dict(), "candidate": self.candidate,
                "verdict": self.verdict}

    @classmethod
    def from_dict(cls, d: dict) -> SummaryStep:
        return cls(d["strategy"], CotActionList.from_dict(d["cot"]), d["candidate"], bool(d["verdict"]))


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    branch: str  # initial | unanimity | standard | hint
    sub_outputs: dict[str, SubOutput]
    sub_strategy: str | None
    summary_strategy: str | None
    summary_cot: CotActionList
    candidate_answer: str
    verifier_verdict: bool
    # Summary attempts made earlier in the same round (before a sub-agent update).
    earlier_steps: tuple[SummaryStep, ...] = ()

    def cots(self) -> list[CotActionList]:
        return [s.cot for s in self.earlier_steps] + [self.summary_cot]

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "branch": self.branch,
            "sub_outputs": {a: o.to_dict() for a, o in self.sub_outputs.items()},
            "sub_strategy": self.sub_strategy,
            "earlier_steps": [s.to_dict() for s in self.earlier_steps],
            "summary_strategy": self.summary_strategy,
            "summary_cot": self.summary_cot.to_dict(),
            "candidate_answer": self.candidate_answer,
            "verifier_verdict": self.verifier_verdict,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RoundRecord:
        return cls(
            round_index=int(d["round_index"]),
            branch=d["branch"],
            sub_outputs={a: SubOutput.from_dict(o) for a, o in d["sub_outputs"].items()},
            sub_strategy=d.get("sub_strategy"),
            summary_strategy=d.get("summary_strategy"),
            summary_cot=CotActionList.from_dict(d["summary_cot"]),
            candidate_answer=d["candidate_answer"],
            verifier_verdict=bool(d["verifier_verdict"]),
            earlier_steps=tuple(SummaryStep.from_dict(s) for s in d.get("earlier_steps", [])),
        )


@dataclass
class ReasoningTrace:
    context: RetrievedContext
    rounds: list[RoundRecord] = field(default_factory=list)
    status: str = "pending"  # solved | unsolved | aborted
    hint_used: bool = False
    natural_cot: str | None = None
    final_answer: str | None = None
    failure: str | None = None
    call_records: list[CallRecord] = field(default_factory=list)

    @property
    def solved(self) -> bool:
        return self.status == "solved"

    @property
    def item_id(self) -> str:
        return self.context.item_id

    def strategies(self) -> list[dict]:
        out = []
        for r in self.rounds:
            for s in r.earlier_steps:
                if s.strategy:
                    out.append({"round": r.round_index, "agent": "summary", "strategy": s.strategy})
            if r.sub_strategy:
                out.append({"round": r.round_index, "agent": "sub", "strategy": r.sub_strategy})
            if r.summary_strategy:
                out.append({"round": r.round_index, "agent": "summary", "strategy": r.summary_strategy})
        return out

    def to_dict(self) -> dict:
        # Timing fields stay out so equal scripts give byte-identical traces.
        return {
            "item_id": self.item_id,
            "status": self.status,
            "solved": self.solved,
            "hint_used": self.hint_used,
            "failure": self.failure,
            "natural_cot": self.natural_cot,
            "final_answer": self.final_answer,
            "context": self.context.to_dict(),
            "rounds": [r.to_dict() for r in self.rounds],
            "call_records": [c.to_dict(timing=False) for c in self.call_records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> ReasoningTrace:
        return cls(
            context=RetrievedContext.from_dict(d["context"]),
            rounds=[RoundRecord.from_dict(r) for r in d["rounds"]],
            status=d["status"],
            hint_used=bool(d["hint_used"]),
            natural_cot=d.get("natural_cot"),
            final_answer=d.get("final_answer"),
            failure=d.get("failure"),
            call_records=[CallRecord.from_dict(c) for c in d.get("call_records", [])],
        )


def item_rng(seed: int, item_id: str) -> random.Random:
    return random.Random(f"{seed}:{item_id}")


def choose_strategy(rng: random.Random, options: Sequence[str]) -> str:
    return options[rng.randrange(len(options))]


def candidate_label(candidate: str, task: TaskSpec) -> str | None:
    """Label of a summary conclusion: first sentence, else the whole text."""
    return extract_label(candidate, task) or match_label(candidate, task)


def unanimous(answers: Sequence[str | None]) -> bool:
    return answers[0] is not None and all(a == answers[0] for a in answers)


def parse_verdict(text: str) -> bool | None:
    token = text.strip().strip("\"'`*.").strip().casefold()
    if token == "true":
        return True
    if token == "false":
        return False
    return None


class ItemSearch:
    """State and agent steps for one item.  Not shared between threads."""

    def __init__(self, ctx: RetrievedContext, config: SearchConfig, client: ChatClient,
                 task: TaskSpec | None = None):
        self.ctx = ctx
        self.config = config
        self.client = client
        self.task = task or get_task(ctx.task)
        self.gold = ctx.target.label
        if self.gold not in self.task:
            raise ValueError(f"gold label {self.gold!r} not in {self.task.name} label set")
        self.rng = item_rng(config.rng_seed, ctx.item_id)
        self.records: list[CallRecord] = []
        self.x_ra = render_x_ra(ctx, self.task)
        self.sub_questions = {a: render_sub_question(ctx, a, self.task) for a in SUB_AGENTS}

    # -- model calls ---------------------------------------------------

    def _call(self, messages: list[ChatMessage], tag: CallTag, sink: list[CallRecord]) -> str:
        try:
            text, rec = self.client.complete(messages, self.config.params, tag)
        except LLMError as exc:
            rec = getattr(exc, "record", None)
            if rec is not None:
                sink.append(rec)
            raise AgentFailure(f"{tag.key()}: {type(exc).__name__}: {exc}") from exc
        sink.append(rec)
        return text

    def _ask(self, prompt: str, tag: CallTag, parse: Callable[[str], object], sink: list[CallRecord],
             reask: str = JSON_REASK):
        messages = [ChatMessage("user", prompt)]
        text = self._call(messages, tag, sink)
        try:
            return parse(text)
        except ParseError as first:
            log.info("%s %s: unusable output, re-asking (%s)", self.ctx.item_id, tag.key(), first)
        messages += [ChatMessage("assistant", text), ChatMessage("user", reask)]
        text = self._call(messages, tag, sink)
        try:
            return parse(text)
        except ParseError as exc:
            raise AgentFailure(f"{tag.key()}: {exc}") from exc

    def _tag(self, agent: str, round_index: int | None = None, strategy: str | None = None) -> CallTag:
        return CallTag(agent, round_index, strategy, self.ctx.item_id)

    # -- sub-agents ----------------------------------------------------

    def _sub_prompt(self, agent: str, strategy: str | None, previous: dict[str, SubOutput] | None) -> str:
        question = self.sub_questions[agent]
        if strategy is None:
            return render(TemplateId(f"sub_init_{agent}"), {"question": question})
        prev = previous[agent].response.to_json()
        if strategy == "DoubleCheck":
            return render(TemplateId.sub_double_check,
                          {"question": question, "previous_response": prev, "role": ROLES[agent]})
        if strategy == "Communication":
            peer_a, peer_b = (a for a in SUB_AGENTS if a != agent)
            return render(TemplateId.sub_communication, {
                "question": question,
                "previous_response": prev,
                "role": ROLES[agent],
                "peer_a": peer_a,
                "peer_a_analysis": self._peer_view(peer_a, previous),
                "peer_b": peer_b,
                "peer_b_analysis": self._peer_view(peer_b, previous),
                "peer_a_expert": EXPERTISE[peer_a],
                "peer_b_expert": EXPERTISE[peer_b],
            })
        if strategy == HINT:
            return render(TemplateId.sub_hint,
                          {"question": question, "previous_response": prev, "role": ROLES[agent], "label": self.gold})
        raise ValueError(f"unknown sub-agent strategy {strategy!r}")

    def _peer_view(self, peer: str, previous: dict[str, SubOutput]) -> str:
        return f"{perspective_block(self.ctx, peer, self.task)}\n\n{previous[peer].response.to_json()}"

    def run_subagents(self, round_index: int, strategy: str | None = None,
                      previous: dict[str, SubOutput] | None = None) -> dict[str, SubOutput]:
        """One call per sub-agent; each sees only its own perspective's examples."""
        prompts = {a: self._sub_prompt(a, strategy, previous) for a in SUB_AGENTS}
        sinks: dict[str, list[CallRecord]] = {a: [] for a in SUB_AGENTS}

        def one(agent: str):
            try:
                resp = self._ask(prompts[agent], self._tag(agent, round_index, strategy), parse_agent_json,
                                 sinks[agent])
            except AgentFailure as exc:
                return exc
            return SubOutput(resp, match_label(resp.entries[0].judgment, self.task))

        if self.client.requires_order:
            results = [one(a) for a in SUB_AGENTS]
        else:
            with ThreadPoolExecutor(max_workers=len(SUB_AGENTS)) as pool:
                results = list(pool.map(one, SUB_AGENTS))
        for a in SUB_AGENTS:
            self.records.extend(sinks[a])
        for r in results:
            if isinstance(r, AgentFailure):
                raise r
        return dict(zip(SUB_AGENTS, results))

    def run_subagents_initial(self) -> dict[str, SubOutput]:
        return self.run_subagents(0)

    # -- summary agent -------------------------------------------------

    def run_summary(self, subs: dict[str, SubOutput], round_index: int, strategy: str | None = None,
                    prior: CotActionList | None = None) -> tuple[CotActionList, str]:
        slots = {
            "question": self.x_ra,
            "sentiment": subs["sentiment"].response.to_json(),
            "semantic": subs["semantic"].response.to_json(),
            "style": subs["style"].response.to_json(),
        }
        if strategy is not None:
            if prior is None:
                raise ValueError("strategy summaries need the prior reasoning")
            slots["previous_reasoning"] = prior.to_json()
        if strategy == HINT:
            slots["label"] = self.gold
        prompt = render(_SUMMARY_TEMPLATES[strategy], slots)
        cot = self._ask(prompt, self._tag("summary", round_index, strategy), parse_summary_cot, self.records)
        return cot, final_answer_of(cot)

    # -- verifier ------------------------------------------------------

    def verify(self, candidate: str, round_index: int, strategy: str | None = None) -> bool:
        tag = self._tag("verifier", round_index, strategy)
        try:
            return verify(candidate, self.gold, self.config.verifier_mode, self.client, self.task,
                          tag=tag, params=self.config.params, sink=self.records)
        except LLMError as exc:
            raise AgentFailure(f"{tag.key()}: {type(exc).__name__}: {exc}") from exc

    # -- emission steps ------------------------------------------------

    def rephrase(self, rounds: Sequence[RoundRecord]) -> str:
        thought = "\n\n".join(c.to_text() for r in rounds for c in r.cots())

        def parse(text: str) -> str:
            value = parse_natural_reasoning(text).strip()
            if any(s in value for s in SENTINELS):
                raise SchemaError("natural reasoning contains reserved think/answer tags", text)
            return value

        prompt = render(TemplateId.rephrase, {"thought_process": thought, "question": self.x_ra})
        return self._ask(prompt, self._tag("rephrase"), parse, self.records)

    def refine(self, natural_cot: str) -> str:
        def parse(text: str) -> str:
            answer = text.strip()
            if any(s in answer for s in SENTINELS):
                raise SchemaError("answer contains reserved think/answer tags", text)
            head, sep, tail = answer.partition("\n\n")
            if not sep or not head.strip() or not tail.strip():
                raise SchemaError("answer needs a label paragraph and an explanation paragraph", text)
            label = extract_label(answer, self.task)
            if label is None:
                raise SchemaError("first sentence must state exactly one label", text)
            if label != self.gold:
                raise SchemaError(f"answer label {label!r} disagrees with the verified label", text)
            return answer

        prompt = render(TemplateId.refine, {"internal_thinking": natural_cot, "question": self.x_ra})
        reask = ANSWER_REASK.format(labels=", ".join(self.task.label_set))
        return self._ask(prompt, self._tag("refine"), parse, self.records, reask=reask)

    # -- the search loop -----------------------------------------------

    def search(self) -> ReasoningTrace:
        trace = ReasoningTrace(self.ctx)
        try:
            self._search(trace)
        except AgentFailure as exc:
            trace.status = "aborted"
            trace.failure = str(exc)
            trace.natural_cot = trace.final_answer = None
            log.warning("item %s aborted: %s", self.ctx.item_id, exc)
        trace.call_records = self.records
        return trace

    def _search(self, trace: ReasoningTrace) -> None:
        rounds = trace.rounds
        subs = self.run_subagents(0)
        cot, cand = self.run_summary(subs, 0)
        chain = cot
        verdict = self.verify(cand, 0)
        rounds.append(RoundRecord(0, "initial", subs, None, None, cot, cand, verdict))

        for i in range(1, self.config.max_rounds + 1):
            if verdict:
                break
            failed = candidate_label(cand, self.task)
            answers = [subs[a].answer for a in SUB_AGENTS]
            earlier: list[SummaryStep] = []
            if unanimous(answers) and answers[0] == failed:
                # Everyone agrees on a known-wrong label: diversify the sub-agents first.
                branch, sub_strategy = "unanimity", "DoubleCheck"
                subs = self.run_subagents(i, sub_strategy, subs)
                answers = [subs[a].answer for a in SUB_AGENTS]
                if unanimous(answers) and answers[0] == failed:
                    sum_strategy = choose_strategy(self.rng, SUMMARY_STRATEGIES)
                    cot, cand = self.run_summary(subs, i, sum_strategy, chain)
                else:
                    sum_strategy = None
                    cot, cand = self.run_summary(subs, i)
                verdict = self.verify(cand, i, sum_strategy)
            else:
                branch, sub_strategy = "standard", None
                sum_strategy = choose_strategy(self.rng, SUMMARY_STRATEGIES)
                cot, cand = self.run_summary(subs, i, sum_strategy, chain)
                verdict = self.verify(cand, i, sum_strategy)
                if not verdict:
                    earlier.append(SummaryStep(sum_strategy, cot, cand, verdict))
                    chain = chain + cot
                    sub_strategy = choose_strategy(self.rng, SUB_STRATEGIES)
                    subs = self.run_subagents(i, sub_strategy, subs)
                    sum_strategy = choose_strategy(self.rng, SUMMARY_STRATEGIES)
                    cot, cand = self.run_summary(subs, i, sum_strategy, chain)
                    verdict = self.verify(cand, i, sum_strategy)
            chain = chain + cot
            rounds.append(RoundRecord(i, branch, subs, sub_strategy, sum_strategy, cot, cand, verdict,
                                      tuple(earlier)))

        if not verdict:
            trace.hint_used = True
            h = self.config.max_rounds + 1
            subs = self.run_subagents(h, HINT, subs)
            cot, cand = self.run_summary(subs, h, HINT, chain)
            verdict = self.verify(cand, h, HINT)
            rounds.append(RoundRecord(h, "hint", subs, HINT, HINT, cot, cand, verdict))

        if not verdict:
            trace.status = "unsolved"
            log.info("item %s unsolved after hint round; dropped", self.ctx.item_id)
            return
        natural = self.rephrase(rounds)
        answer = self.refine(natural)
        trace.natural_cot, trace.final_answer = natural, answer
        trace.status = "solved"


def search(ctx: RetrievedContext, config: SearchConfig, client: ChatClient,
           task: TaskSpec | None = None) -> ReasoningTrace:
    return ItemSearch(ctx, config, client, task).search()


def verify(candidate: str, gold: str, mode: str, client: ChatClient | None, task: TaskSpec, *,
           tag: CallTag | None = None, params: GenerationParams | None = None,
           sink: list[CallRecord] | None = None) -> bool:
    """Exact label match, LLM judgment, or LLM judgment with exact-match fallback."""
    if gold not in task:
        raise ValueError(f"gold {gold!r} not in {task.name} label set")
    if mode not in VERIFIER_MODES:
        raise ValueError(f"verifier mode must be one of {VERIFIER_MODES}")
    if mode == "exact_match":
        return candidate_label(candidate, task) == gold
    if client is None:
        raise ValueError(f"verifier mode {mode!r} needs a client")
    prompt = render(TemplateId.verify, {"model_response": candidate, "reference_answer": gold})
    try:
        text, rec = client.complete([ChatMessage("user", prompt)], params, tag or CallTag("verifier"))
    except LLMError as exc:
        if sink is not None and getattr(exc, "record", None) is not None:
            sink.append(exc.record)
        raise
    if sink is not None:
        sink.append(rec)
    verdict = parse_verdict(text)
    if verdict is not None:
        return verdict
    if mode == "llm":
        raise VerifierAmbiguousError(f"verdict {text.strip()[:60]!r} is not True/False")
    return candidate_label(candidate, task) == gold


def run_search(contexts: Iterable[RetrievedContext], config: SearchConfig, client: ChatClient,
               workers: int = 1, task: TaskSpec | None = None) -> Iterator[ReasoningTrace]:
    """Yield one trace per context, in input order.

    FIFO-scripted backends force a single worker so the script is consumed
    in a reproducible order.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if client.requires_order or workers == 1:
        for ctx in contexts:
            yield search(ctx, config, client, task)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(lambda c: search(c, config, client, task), contexts)


_SFT_TEXT_RE = re.compile(r"<think>\n(.*)\n</think>\n\n<answer>\n(.*)\n</answer>", re.DOTALL)


def parse_sft_text(text: str) -> tuple[str, str]:
    """Exact inverse of the rendered SFT record: ``(think, answer)``."""
    m = _SFT_TEXT_RE.fullmatch(text)
    if m is None:
        raise ValueError("text is not a rendered SFT record")
    return m.group(1), m.group(2)


@dataclass(frozen=True)
class SftRecord:
    input: str
    think: str
    answer: str
    provenance: dict

    def rendered(self) -> str:
        return render_sft(self.think, self.answer)

    def to_dict(self) -> dict:
        return {"input": self.input, "think": self.think, "answer": self.answer, "provenance": self.provenance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    def text_dict(self) -> dict:
        return {"input": self.input, "output": self.rendered(), "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> SftRecord:
        return cls(str(d["input"]), str(d["think"]), str(d["answer"]), dict(d.get("provenance", {})))


def empty_counts() -> dict[str, int]:
    return {"attempted": 0, "solved_no_hint": 0, "solved_with_hint": 0, "aborted": 0, "dropped": 0}


def tally(traces: Iterable[ReasoningTrace]) -> dict[str, int]:
    counts = empty_counts()
    for t in traces:
        counts["attempted"] += 1
        if t.solved:
            counts["solved_with_hint" if t.hint_used else "solved_no_hint"] += 1
        elif t.status == "unsolved":
            counts["dropped"] += 1
        else:
            counts["aborted"] += 1
    return counts


def emit_sft(traces: Iterable[ReasoningTrace], include_hint_records: bool = True,
             task: TaskSpec | None = None) -> tuple[list[SftRecord], dict]:
    """One record per solved trace; hint-solved traces are always flagged and
    kept only when ``include_hint_records``."""
    records, excluded_hint, skipped = [], 0, 0
    for t in traces:
        if not t.solved or t.natural_cot is None or t.final_answer is None:
            skipped += 1
            continue
        if t.hint_used and not include_hint_records:
            excluded_hint += 1
            continue
        item_task = task or get_task(t.context.task)
        records.append(SftRecord(
            input=render_x_ra(t.context, item_task),
            think=t.natural_cot,
            answer=t.final_answer,
            provenance={
                "item_id": t.item_id,
                "gold_label": t.context.target.label,
                "rounds_used": len(t.rounds),
                "hint_used": t.hint_used,
                "strategies": t.strategies(),
            },
        ))
    manifest = {"emitted": len(records), "excluded_hint": excluded_hint, "excluded_unsolved": skipped}
    return records, manifest
