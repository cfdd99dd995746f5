"""Stage commands: retrieve, search, emit-train, reward, eval.

Every stage writes line-delimited JSON into the configured output directory
and a ``manifest_<stage>.json`` recording the config hash, counts, and the
sha256 of each input and output file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from filelock import FileLock, Timeout

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .evalkit import AlignmentError, Prediction, format_per_class, format_table, score
from .jsonio import (
    DataFileError,
    dumps,
    load_corpus,
    load_embeddings,
    load_rows,
    read_jsonl,
    recover_jsonl,
    sha256_file,
    write_json,
    write_jsonl,
    write_text_atomic,
)
from .llm_client import ChatClient, LLMError, ScriptedBackend
from .pathsearch import ReasoningTrace, emit_sft, run_search, tally
from .prompts import TemplateError, get_task
from .rewards import emit_rl, score_output
from .vectorspace import RetrievedContext, VectorSpaceError, assemble_contexts, build_index, split_ra

log = logging.getLogger("xdomain")

CONTEXTS = "contexts.jsonl"
SEARCH_SPLIT = "search_split.jsonl"
RL_SPLIT = "rl_split.jsonl"
TRACES = "traces.jsonl"
CALLS = "calls.jsonl"
SFT = "sft.jsonl"
SFT_TEXT = "sft_text.jsonl"
SFT_TRAIN = "sft_train.jsonl"
SFT_TRAIN_TEXT = "sft_train_text.jsonl"
RL_TRAIN = "rl_train.jsonl"
REWARDS = "rewards.jsonl"
EVAL_REPORT = "eval_report.json"
EVAL_TABLE = "eval_table.txt"


class StageError(RuntimeError):
    pass


class Stage:
    """Bookkeeping shared by every command: timing, digests, manifest."""

    def __init__(self, name: str, cfg: PipelineConfig):
        self.name = name
        self.cfg = cfg
        self.out = cfg.paths.outputs
        self.started = time.monotonic()
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, path: Path, hint: str) -> Path:
        if not path.is_file():
            raise StageError(f"missing upstream output {path} (run `{hint}` first)")
        self.inputs[path.name] = sha256_file(path)
        return path

    def produced(self, *paths: Path) -> None:
        for p in paths:
            self.outputs[p.name] = sha256_file(p)

    def finish(self, counts: dict) -> dict:
        manifest = {
            "stage": self.name,
            "config_hash": self.cfg.config_hash(),
            "version": __version__,
            "counts": counts,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "wall_time_s": round(time.monotonic() - self.started, 3),
        }
        write_json(self.path(f"manifest_{self.name}.json"), manifest)
        return manifest


def cmd_retrieve(cfg: PipelineConfig, args) -> dict:
    st = Stage("retrieve", cfg)
    items = load_corpus(cfg.paths.corpus)
    records = load_embeddings(cfg.paths.embeddings)
    st.inputs["corpus"] = sha256_file(cfg.paths.corpus)
    st.inputs["embeddings"] = sha256_file(cfg.paths.embeddings)
    targets = [it for it in items if it.origin == "target"]
    if not targets:
        raise StageError(f"{cfg.paths.corpus}: no items with origin 'target'")
    task = get_task(cfg.task)
    bad = sorted({it.label for it in items} - set(task.label_set))
    if bad:
        raise StageError(f"{cfg.paths.corpus}: labels {bad} are not in the {task.name} label set")
    index = build_index(records, items)
    contexts = assemble_contexts(targets, index, cfg.retrieval, task.name)
    search, rl = split_ra(contexts, cfg.seed)
    for name, rows in ((CONTEXTS, contexts), (SEARCH_SPLIT, search), (RL_SPLIT, rl)):
        write_jsonl(st.path(name), (c.to_dict() for c in rows))
        st.produced(st.path(name))
    return st.finish({"corpus_items": len(items), "targets": len(targets), "contexts": len(contexts),
                      "search": len(search), "rl": len(rl)})


def make_client(cfg: PipelineConfig, args) -> ChatClient:
    if args.mock_script:
        backend = ScriptedBackend.from_file(args.mock_script)
        return ChatClient(backend, parallelism=cfg.parallelism, params=cfg.generation, sleep=lambda s: None)
    if cfg.endpoint is None:
        raise ConfigError("search needs an 'endpoint' section or --mock-script")
    return ChatClient.for_endpoint(cfg.endpoint, parallelism=cfg.parallelism, params=cfg.generation)


def cmd_search(cfg: PipelineConfig, args) -> dict:
    st = Stage("search", cfg)
    contexts = load_rows(st.need(st.path(SEARCH_SPLIT), "xdomain retrieve"), RetrievedContext.from_dict)
    if args.mock_script:
        st.inputs["mock_script"] = sha256_file(args.mock_script)
    client = make_client(cfg, args)

    traces_path, calls_path = st.path(TRACES), st.path(CALLS)
    done = {row["item_id"] for row in recover_jsonl(traces_path)}
    pending = [c for c in contexts if c.item_id not in done]
    if args.limit is not None:
        pending = pending[: args.limit]
    log.info("search: %d pending, %d already traced", len(pending), len(done))

    new: list[ReasoningTrace] = []
    with traces_path.open("a", encoding="utf-8") as tf, calls_path.open("a", encoding="utf-8") as cf:
        for trace in run_search(pending, cfg.search, client, workers=cfg.parallelism):
            tf.write(trace.to_json() + "\n")
            tf.flush()
            for rec in trace.call_records:
                cf.write(dumps(rec.to_dict()) + "\n")
            cf.flush()
            new.append(trace)

    traces = sorted((ReasoningTrace.from_dict(r) for r in read_jsonl(traces_path)), key=lambda t: t.item_id)
    records, emit_counts = emit_sft(traces, cfg.search.include_hint_records)
    write_jsonl(st.path(SFT), (r.to_dict() for r in records))
    write_jsonl(st.path(SFT_TEXT), (r.text_dict() for r in records))
    st.produced(traces_path, st.path(SFT), st.path(SFT_TEXT))
    counts = tally(new)
    counts["skipped"] = sum(c.item_id in done for c in contexts)
    counts["remaining"] = len(contexts) - counts["skipped"] - len(new)
    counts["cumulative"] = tally(traces)
    counts["sft"] = emit_counts
    return st.finish(counts)


def cmd_emit_train(cfg: PipelineConfig, args) -> dict:
    st = Stage("emit-train", cfg)
    traces = [ReasoningTrace.from_dict(r) for r in read_jsonl(st.need(st.path(TRACES), "xdomain search"))]
    rl_contexts = load_rows(st.need(st.path(RL_SPLIT), "xdomain retrieve"), RetrievedContext.from_dict)
    traces.sort(key=lambda t: t.item_id)
    rl_contexts.sort(key=lambda c: c.item_id)
    sft, sft_counts = emit_sft(traces, cfg.search.include_hint_records)
    rl = emit_rl(rl_contexts, get_task(cfg.task))
    write_jsonl(st.path(SFT_TRAIN), (r.to_dict() for r in sft))
    write_jsonl(st.path(SFT_TRAIN_TEXT), (r.text_dict() for r in sft))
    write_jsonl(st.path(RL_TRAIN), (r.to_dict() for r in rl))
    st.produced(st.path(SFT_TRAIN), st.path(SFT_TRAIN_TEXT), st.path(RL_TRAIN))
    log.info("emit-train: %d SFT records, %d RL records", len(sft), len(rl))
    return st.finish({"traces": len(traces), "sft": len(sft), "rl": len(rl), **sft_counts})


def _input_file(args, st: Stage) -> Path:
    path = Path(args.input)
    if not path.is_file():
        raise DataFileError(path, None, "file not found")
    st.inputs[path.name] = sha256_file(path)
    return path


def cmd_reward(cfg: PipelineConfig, args) -> dict:
    st = Stage("reward", cfg)
    task = get_task(cfg.task)
    path = _input_file(args, st)

    def build(row: dict):
        # Emitted SFT text rows carry the gold label in their provenance.
        gold = row["gold_label"] if "gold_label" in row else row["provenance"]["gold_label"]
        if gold not in task:
            raise ValueError(f"gold_label {gold!r} not in the {task.name} label set")
        return score_output(str(row["output"]), gold, task)

    scores = load_rows(path, build)
    out = Path(args.output) if args.output else st.path(REWARDS)
    write_jsonl(out, (s.to_dict() for s in scores))
    st.produced(out)
    counts = {
        "scored": len(scores),
        "format_1": sum(s.format for s in scores),
        "accuracy_1.0": sum(s.accuracy == 1.0 for s in scores),
        "accuracy_0.1": sum(s.accuracy == 0.1 for s in scores),
        "accuracy_0.0": sum(s.accuracy == 0.0 for s in scores),
    }
    return st.finish(counts)


def cmd_eval(cfg: PipelineConfig, args) -> dict:
    st = Stage("eval", cfg)
    task = get_task(cfg.task)
    path = _input_file(args, st)
    st.inputs["corpus"] = sha256_file(cfg.paths.corpus)
    preds = load_rows(path, lambda r: Prediction.from_output(str(r["item_id"]), str(r["raw_output"]), task))
    items = load_corpus(cfg.paths.corpus)
    pool = [it for it in items if it.origin == "target"] if args.golds == "targets" else items
    golds = {it.item_id: it.label for it in pool}
    if args.golds == "predicted":
        golds = {i: golds[i] for i in (p.item_id for p in preds) if i in golds}
    cm, report = score(preds, golds, task, args.unparsed_policy)
    write_json(st.path(EVAL_REPORT), {"confusion": cm.to_dict(), "metrics": report.to_dict(),
                                      "unparsed_policy": args.unparsed_policy})
    table = format_table({args.name: report}) + "\n\n" + format_per_class(report) + "\n"
    write_text_atomic(st.path(EVAL_TABLE), table)
    st.produced(st.path(EVAL_REPORT), st.path(EVAL_TABLE))
    print(table, end="")
    return st.finish({"predictions": len(preds), "unparsed": cm.unparsed})


COMMANDS: dict[str, Callable] = {
    "retrieve": cmd_retrieve,
    "search": cmd_search,
    "emit-train": cmd_emit_train,
    "reward": cmd_reward,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline YAML config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--parallelism", type=int, help="override worker/request parallelism")
    common.add_argument("--mock-script", help="JSON script for the offline scripted backend")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="xdomain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("retrieve", parents=[common], help="retrieve neighbors and split contexts")
    p = sub.add_parser("search", parents=[common], help="run reasoning-path search over the search split")
    p.add_argument("--limit", type=int, help="process at most this many new items")
    sub.add_parser("emit-train", parents=[common], help="write SFT and RL training files")
    p = sub.add_parser("reward", parents=[common], help="score {output, gold_label} lines")
    p.add_argument("--input", required=True)
    p.add_argument("--output", help="defaults to <outputs>/rewards.jsonl")
    p = sub.add_parser("eval", parents=[common], help="score {item_id, raw_output} predictions")
    p.add_argument("--input", required=True)
    p.add_argument("--unparsed-policy", choices=("wrong", "drop"), default="wrong")
    p.add_argument("--golds", choices=("targets", "predicted"), default="targets",
                   help="gold set: all target items, or the corpus items that were predicted")
    p.add_argument("--name", default="model", help="row name in the text table")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.parallelism)
        cfg.paths.outputs.mkdir(parents=True, exist_ok=True)
        with FileLock(str(cfg.paths.outputs / ".xdomain.lock"), timeout=0):
            manifest = COMMANDS[args.command](cfg, args)
    except Timeout:
        return _fail("LockHeld", "another xdomain command is using this output directory", 3)
    except (ConfigError, DataFileError, StageError, AlignmentError, VectorSpaceError, TemplateError,
            LLMError, ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    log.info("%s done: %s", args.command, manifest["counts"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
