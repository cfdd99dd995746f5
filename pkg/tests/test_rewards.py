import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from builders import make_context
from xdomain.prompts import get_task, render_sft, render_x_ra
from xdomain.rewards import (
    RlRecord,
    accuracy_reward,
    emit_rl,
    extract_label,
    find_labels,
    format_reward,
    score_output,
)

AMT, PHEME, COCO = get_task("AMTCele"), get_task("PHEME"), get_task("COCO")


def _variants(label):
    low = label.lower()
    if "-" in low:
        head, tail = low.split("-", 1)
        return [f"{head}-{tail}", f"{head} {tail}", f"{head}{tail}"]
    return [low]


def oracle_labels(sentence, task):
    """Character scan: longer labels claim spans first; overlapping shorter hits are ignored."""
    text = sentence.lower()
    claimed = [False] * len(text)
    found = []
    for label in sorted(task.label_set, key=lambda s: (-len(s), s)):
        for i in range(len(text)):
            for v in _variants(label):
                j = i + len(v)
                if text[i:j] == v and not any(claimed[i:j]):
                    for x in range(i, j):
                        claimed[x] = True
                    if label not in found:
                        found.append(label)
    return found


def oracle_extract(text, task):
    text = text.lstrip()
    cut = min([i for i, c in enumerate(text) if c in ".!?\n"] or [len(text)])
    found = oracle_labels(text[:cut], task)
    return found[0] if len(found) == 1 else None


@pytest.mark.parametrize("text,task,want", [
    ("This text is a non-rumour.", PHEME, "non-rumour"),
    ("This text is a rumour.", PHEME, "rumour"),
    ("Non rumour, clearly.", PHEME, "non-rumour"),
    ("It is a nonrumour", PHEME, "non-rumour"),
    ("Unrelated. It merely uses the keyword.", COCO, "Unrelated"),
    ("related", COCO, "Related"),
    ("Conspiracy. The tweet actively propagates it.", COCO, "Conspiracy"),
    ("It could be fake or legit.", AMT, None),
    ("No idea here.", AMT, None),
    ("\n  Fake news! Legit later.", AMT, "fake"),
])
def test_extract_label_examples(text, task, want):
    assert extract_label(text, task) == want


def test_extract_label_matches_character_oracle_exhaustively():
    templates = ["{a} {b}", "{a}{b}", "It is {a}, not {b}.", "{a}. {b}", "{a}", "maybe {A} or {B}!", "{a}-{b}"]
    for task in (PHEME, COCO, AMT):
        spellings = [v for lab in task.label_set for v in _variants(lab) + [lab.upper(), lab.title()]]
        for a, b in itertools.product(spellings, repeat=2):
            for t in templates:
                s = t.format(a=a, b=b, A=a.upper(), B=b.capitalize())
                assert extract_label(s, task) == oracle_extract(s, task), s
                assert sorted(find_labels(s, task)) == sorted(oracle_labels(s, task)), s


@pytest.mark.parametrize("gold,pred,want", [
    ("rumour", "rumour", 1.0),
    ("rumour", "non-rumour", 0.1),
    ("non-rumour", "rumour", 0.1),
    ("non-rumour", "non-rumour", 1.0),
])
def test_pheme_substring_hazard(gold, pred, want):
    out = render_sft("thinking", f"This is a {pred}.\n\nReasons follow.")
    assert accuracy_reward(out, gold, PHEME) == want


def test_accuracy_three_outcomes():
    good = render_sft("r", "It is fake.\n\nBecause of the tone.")
    wrong = render_sft("r", "It is legit.\n\nBecause of the tone.")
    none = render_sft("r", "Hard to say.\n\nBecause of the tone.")
    assert [accuracy_reward(o, "fake", AMT) for o in (good, wrong, none)] == [1.0, 0.1, 0.0]


@pytest.mark.parametrize("text,want", [
    ("<think>\nr\n</think>\n\n<answer>\nIt is fake.\n\nBecause…</answer>", 1),
    ("<think>\nr\n</think>\n<answer>\nIt is fake.\n\nBecause…</answer>", 0),
    ("<think>r\n</think>\n\n<answer>\nIt is fake.\n\nBecause…</answer>", 0),
    ("<think>\nr</think>\n\n<answer>\nIt is fake.\n\nBecause…</answer>", 0),
    ("<think>\nr\n</think>\n\n<answer>It is fake.\n\nBecause…</answer>", 0),
    ("<think>\nr\n</think>\n\n<answer>\nIt is fake.\nBecause…</answer>", 0),
    ("<think>\nr\n</think>\n\n<answer>\nIt is fake.\n\nBecause…</answer>\n  ", 1),
    ("<think>\nr\n</think>\n\n<answer>\nIt is fake.\n\nBecause…</answer> tail", 0),
    ("prefix <think>\nr\n</think>\n\n<answer>\nIt is fake.\n\nBecause…</answer>", 0),
    ("<think>\nr\n</think>\n\n<answer>\nIt is fake.\n\nBecause…\n</answer>", 1),
    ("", 0),
])
def test_format_fixtures(text, want):
    assert format_reward(text).score == want


def test_format_violation_still_scores_accuracy_from_whole_text():
    s = score_output("It is legit. No tags at all.", "legit", AMT)
    assert (s.format, s.accuracy, s.extracted_label) == (0, 1.0, "legit")


def test_format_captures_segments():
    m = format_reward("<think>\nmy thoughts\n</think>\n\n<answer>\nFake.\n\nExplanation.</answer>")
    assert m.think == "my thoughts" and m.answer == "Fake.\n\nExplanation."


_free = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1).filter(lambda s: "<" not in s)


@given(_free, _free, _free)
def test_rendered_sft_always_scores_format_one(think, first, rest):
    assert format_reward(render_sft(think, f"{first}\n\n{rest}")).score == 1


@given(st.text(max_size=60), st.sampled_from(["fake", "legit"]))
def test_accuracy_range_and_absent_iff_zero(text, gold):
    s = score_output(text, gold, AMT)
    assert s.accuracy in (1.0, 0.1, 0.0)
    assert (s.accuracy == 0.0) == (s.extracted_label is None)
    assert s.extracted_label in (None, "fake", "legit")


@given(st.sampled_from(["fake", "legit"]), st.sampled_from(["fake", "legit", "unsure"]))
def test_accuracy_monotone_under_correction(gold, pred):
    before = accuracy_reward(f"It is {pred}.\n\nx", gold, AMT)
    after = accuracy_reward(f"It is {gold}.\n\nx", gold, AMT)
    assert after >= before


def test_emit_rl_records():
    ctxs = [make_context(f"r{i}", "fake" if i % 2 else "legit") for i in range(11)]
    recs = emit_rl(ctxs)
    assert len(recs) == 11
    assert recs[0].input == render_x_ra(ctxs[0])
    assert [RlRecord.from_dict(r.to_dict()) for r in recs] == recs


def test_emit_rl_rejects_foreign_label():
    with pytest.raises(ValueError):
        emit_rl([make_context("x", "rumour")])
