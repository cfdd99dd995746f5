"""One test per acceptance criterion. Each prints a single PASS/FAIL line."""

import contextlib
import json
import random
import time
from collections import Counter

import pytest

from builders import (
    answer_text,
    happy_script,
    hint_solved_script,
    make_context,
    perpetual_script,
    round_one_script,
    write_workspace,
)
from test_evalkit import AMT_F1, PHEME_F1, PHEME_MEANS, TRI, naive_scores, preds_from
from test_rewards import oracle_extract
from test_vectorspace import _two_domain_clusters, oracle_topk, random_corpus, welch_reference
from xdomain.cli import main
from xdomain.evalkit import balance_classes, rank_domain_difficulty, score
from xdomain.jsonio import read_jsonl
from xdomain.llm_client import ChatClient, ScriptedBackend
from xdomain.pathsearch import SUB_AGENTS, SearchConfig, SftRecord, emit_sft, parse_sft_text, run_search, search
from xdomain.prompts import get_task, render_sft
from xdomain.rewards import accuracy_reward, extract_label, format_reward
from xdomain.vectorspace import EmbeddingRecord, LabeledItem, build_index, label_agreement_table, topk, welch_ttest

AMT, PHEME = get_task("AMTCele"), get_task("PHEME")
EXACT = SearchConfig(verifier_mode="exact_match", rng_seed=5)


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(n, text):
        ok = False
        try:
            yield
            ok = True
        finally:
            with capsys.disabled():
                print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {text}")
    return run


def scripted(script):
    backend = ScriptedBackend(script)
    return ChatClient(backend, sleep=lambda s: None), backend


def test_criterion_1_topk_oracle_equivalence(criterion):
    with criterion(1, "top-k equals exhaustive scan-sort on 100 random corpora in under 10 s"):
        rng = random.Random(2024)
        start = time.perf_counter()
        for c in range(100):
            dim = (4, 16, 64)[c % 3]
            k = (1, 2, 8)[(c // 3) % 3]
            n = rng.randint(max(k, 10), 500)
            items, records, vectors = random_corpus(rng, n, dim, dup_every=rng.choice([0, 3, 7]))
            index = build_index(records, items)
            for _ in range(3):
                q = tuple(rng.gauss(0, 1) for _ in range(dim))
                got = topk(index, EmbeddingRecord("q", "semantic", q), k)
                want = oracle_topk(items, vectors, q, k)
                assert [x.item.item_id for x in got] == [w[1] for w in want]
                assert [x.similarity for x in got] == pytest.approx([w[0] for w in want], abs=1e-12)
        assert time.perf_counter() - start < 10


def test_criterion_2_similarity_statistics(criterion):
    with criterion(2, "Welch t-test matches the reference; same-class agreement beats cross-class"):
        rng = random.Random(99)
        for _ in range(50):
            a = [rng.gauss(0.5, rng.uniform(0.05, 1)) for _ in range(rng.randint(3, 60))]
            b = [rng.gauss(0.3, rng.uniform(0.05, 1)) for _ in range(rng.randint(3, 60))]
            s = welch_ttest(a, b)
            t, p = welch_reference(a, b)
            assert s.t_statistic == pytest.approx(t, abs=1e-6)
            assert s.p_value == pytest.approx(p, abs=1e-6)
        same = [0.2, 0.4, 0.9, 0.7]
        s = welch_ttest(same, list(same))
        assert (s.t_statistic, s.p_value) == (0.0, 1.0)
        items, _, index = _two_domain_clusters()
        for perspective in ("sentiment", "semantic", "style"):
            table = label_agreement_table(index, items, [1, 2, 4, 8], perspective)
            for (a, b, k), st in table.tests.items():
                assert st.t_statistic > 0 and st.p_value < 0.05, (perspective, a, b, k)


def test_criterion_3_golden_transcripts(criterion):
    with criterion(3, "happy, loop-avoidance and hint transcripts; deterministic; 20 items under 5 s"):
        ctx = make_context("g-a", "fake")
        t = search(ctx, EXACT, scripted(happy_script(ctx))[0])
        assert t.solved and len(t.rounds) == 1 and t.strategies() == []

        ctx = make_context("g-b", "fake")
        client, backend = scripted(perpetual_script(ctx, "legit"))
        t = search(ctx, EXACT, client)
        first_r1 = next(tag for tag, _ in backend.requests if tag.round == 1)
        assert first_r1.agent in SUB_AGENTS and first_r1.strategy == "DoubleCheck"
        assert t.rounds[1].branch == "unanimity"

        ctx = make_context("g-c", "fake")
        client, backend = scripted(perpetual_script(ctx, "legit", sub_labels=("fake", "legit", "legit")))
        t = search(ctx, EXACT, client)
        assert [r.branch for r in t.rounds] == ["initial", "standard", "standard", "standard", "hint"]
        hint = [m[0].content for tag, m in backend.requests if tag.round == 4]
        assert hint and all("I'll secretly tell you that the labeled answer is \"fake\"" in p for p in hint)

        ctxs = [make_context(f"g{i:02d}", "fake" if i % 2 else "legit") for i in range(20)]
        script = {}
        for i, c in enumerate(ctxs):
            wrong = "legit" if c.target.label == "fake" else "fake"
            builder = (happy_script, round_one_script, hint_solved_script,
                       lambda x, w=wrong: perpetual_script(x, w, sub_labels=(w, w, x.target.label)))[i % 4]
            script.update(builder(c))
        start = time.perf_counter()
        first = [t.to_json() for t in run_search(ctxs, EXACT, scripted(script)[0], workers=4)]
        assert time.perf_counter() - start < 5
        second = [t.to_json() for t in run_search(ctxs, EXACT, scripted(script)[0], workers=1)]
        assert first == second


def test_criterion_4_emission_soundness(criterion):
    with criterion(4, "every SFT record from a 50-item run is well formed, gold-labelled and round-trips"):
        ctxs = [make_context(f"e{i:02d}", "fake" if i % 3 else "legit") for i in range(50)]
        script = {}
        for i, c in enumerate(ctxs):
            script.update((happy_script, round_one_script, hint_solved_script)[i % 3](c))
        traces = list(run_search(ctxs, EXACT, scripted(script)[0], workers=4))
        records, counts = emit_sft(traces, include_hint_records=True)
        assert counts["emitted"] == len(records) == 50
        gold = {c.item_id: c.target.label for c in ctxs}
        for rec in records:
            text = rec.rendered()
            assert format_reward(text).score == 1
            assert extract_label(rec.answer, AMT) == gold[rec.provenance["item_id"]]
            assert parse_sft_text(text) == (rec.think, rec.answer)
            assert SftRecord.from_dict(json.loads(rec.to_json())) == rec


def test_criterion_5_reward_golden_suite(criterion):
    with criterion(5, "accuracy {1.0, 0.1, 0.0}, anchored format fixtures, PHEME substring hazard"):
        outs = [render_sft("r", f"{s}\n\nBecause of the tone.") for s in ("It is fake.", "It is legit.", "Unclear.")]
        assert [accuracy_reward(o, "fake", AMT) for o in outs] == [1.0, 0.1, 0.0]
        good = "<think>\nr\n</think>\n\n<answer>\nIt is fake.\n\nWhy.</answer>"
        assert format_reward(good).score == 1
        for broken in (good.replace("</think>\n\n", "</think>\n"), good.replace("<think>\n", "<think>"),
                       good.replace("\n</think>", "</think>"), good.replace("<answer>\n", "<answer>"),
                       good.replace("fake.\n\n", "fake.\n"), "x" + good, good + " tail"):
            assert format_reward(broken).score == 0, broken
        for g in ("rumour", "non-rumour"):
            for p in ("rumour", "non-rumour"):
                text = render_sft("t", f"This is a {p}.\n\nReasons.")
                assert extract_label(f"This is a {p}.", PHEME) == oracle_extract(f"This is a {p}.", PHEME) == p
                assert accuracy_reward(text, g, PHEME) == (1.0 if g == p else 0.1)


def test_criterion_6_metrics_oracle(criterion):
    with criterion(6, "metrics match naive counting on 100 instances; hand confusion gives 0.75"):
        rng = random.Random(6)
        for _ in range(100):
            task = rng.choice([AMT, TRI])
            n = rng.randint(1, 150)
            golds = {f"i{j}": rng.choice(task.label_set) for j in range(n)}
            labels = [rng.choice(task.label_set + (None,)) for _ in range(n)]
            _, r = score(preds_from(golds, labels), golds, task)
            acc, per, macro = naive_scores(list(zip(golds.values(), labels)), task.label_set)
            assert r.accuracy == pytest.approx(acc, abs=1e-12)
            assert (r.macro_precision, r.macro_recall, r.macro_f1) == pytest.approx(macro, abs=1e-12)
            for c in task.label_set:
                assert (r.per_class[c].precision, r.per_class[c].recall, r.per_class[c].f1) == \
                    pytest.approx(per[c], abs=1e-12)
        golds = {f"f{n}": "fake" for n in range(10)} | {f"l{n}": "legit" for n in range(10)}
        labels = ["fake"] * 8 + ["legit"] * 2 + ["fake"] * 3 + ["legit"] * 7
        _, r = score(preds_from(golds, labels), golds, AMT)
        f_fake = 2 * (8 / 11) * (8 / 10) / (8 / 11 + 8 / 10)
        f_legit = 2 * (7 / 9) * (7 / 10) / (7 / 9 + 7 / 10)
        assert r.accuracy == pytest.approx(0.75, abs=1e-9)
        assert r.macro_f1 == pytest.approx((f_fake + f_legit) / 2, abs=1e-9)


def test_criterion_7_published_spot_checks(criterion):
    with criterion(7, "published F1 pairs rank celebrity and prince/ebola/gurlitt/putinmissing hardest; 458/458"):
        amt = rank_domain_difficulty(AMT_F1)
        assert amt[0][0] == "celebrity" and amt[0][1] == pytest.approx(0.839, abs=5e-4)
        pheme = rank_domain_difficulty(PHEME_F1)
        assert [d for d, _ in pheme[:4]] == ["prince", "ebola", "gurlitt", "putinmissing"]
        for d, mean in pheme[:4]:
            assert mean == pytest.approx(PHEME_MEANS[d], abs=5e-4)
        items = [LabeledItem(f"c{i}", "t", "non-rumour" if i < 1621 else "rumour", "charliehebdo")
                 for i in range(1621 + 458)]
        out = balance_classes(items, seed=0)
        assert Counter(it.label for it in out) == {"non-rumour": 458, "rumour": 458}


def _pipeline(root):
    ws = write_workspace(root, n_targets=20)
    base = ["--config", str(ws["config"])]
    assert main(["retrieve", *base]) == 0
    search_ids = [r["target"]["item_id"] for r in read_jsonl(ws["out"] / "search_split.jsonl")]
    ws = write_workspace(root, n_targets=20, hint_ids=tuple(search_ids[:2]))
    assert main(["search", *base, "--mock-script", str(ws["script"])]) == 0
    assert main(["emit-train", *base]) == 0
    assert main(["reward", *base, "--input", str(ws["out"] / "sft_train_text.jsonl")]) == 0
    preds = ws["out"] / "predictions.jsonl"
    rows = read_jsonl(ws["out"] / "sft_train.jsonl")
    preds.write_text("".join(json.dumps({"item_id": r["provenance"]["item_id"], "raw_output": r["answer"]}) + "\n"
                             for r in rows))
    assert main(["eval", *base, "--input", str(preds), "--golds", "predicted"]) == 0
    return ws


def test_criterion_8_end_to_end_dry_run(criterion, tmp_path, capsys):
    with criterion(8, "retrieve, search, emit-train, reward, eval chain in under 30 s, coherent, reproducible"):
        start = time.perf_counter()
        ws = _pipeline(tmp_path / "a")
        assert time.perf_counter() - start < 30
        out = ws["out"]
        m = {s: json.loads((out / f"manifest_{s}.json").read_text())
             for s in ("retrieve", "search", "emit-train", "reward", "eval")}
        assert len({x["config_hash"] for x in m.values()}) == 1
        assert m["search"]["inputs"]["search_split.jsonl"] == m["retrieve"]["outputs"]["search_split.jsonl"]
        assert m["emit-train"]["inputs"]["traces.jsonl"] == m["search"]["outputs"]["traces.jsonl"]
        assert m["emit-train"]["inputs"]["rl_split.jsonl"] == m["retrieve"]["outputs"]["rl_split.jsonl"]
        assert m["reward"]["inputs"]["sft_train_text.jsonl"] == m["emit-train"]["outputs"]["sft_train_text.jsonl"]
        assert m["search"]["counts"]["attempted"] == 10 and m["search"]["counts"]["solved_with_hint"] == 2
        assert m["emit-train"]["counts"]["sft"] == 10 and m["emit-train"]["counts"]["rl"] == 10
        assert m["reward"]["counts"]["format_1"] == 10 and m["reward"]["counts"]["accuracy_1.0"] == 10
        assert json.loads((out / "eval_report.json").read_text())["metrics"]["accuracy"] == 1.0

        ws2 = _pipeline(tmp_path / "b")
        skip = {"calls.jsonl"}
        names = sorted(p.name for p in out.iterdir() if p.is_file() and not p.name.startswith(("manifest_", "."))
                       and p.name not in skip)
        assert names == sorted(p.name for p in ws2["out"].iterdir() if p.is_file()
                               and not p.name.startswith(("manifest_", ".")) and p.name not in skip)
        for name in names:
            assert (out / name).read_bytes() == (ws2["out"] / name).read_bytes(), name
        capsys.readouterr()
