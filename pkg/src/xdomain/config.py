"""Pipeline configuration: one YAML file, ``${VAR}`` interpolation, flag overrides."""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .llm_client import GenerationParams, ModelEndpoint
from .pathsearch import SearchConfig
from .prompts import get_task
from .vectorspace import PERSPECTIVES, RetrievalConfig

_VAR_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    corpus: Path
    embeddings: Path
    outputs: Path


@dataclass(frozen=True)
class PipelineConfig:
    task: str
    paths: Paths
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    endpoint: ModelEndpoint | None = None
    generation: GenerationParams = field(default_factory=GenerationParams)
    parallelism: int = 4
    seed: int = 0

    def __post_init__(self):
        get_task(self.task)
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")

    def semantic_dict(self) -> dict:
        """Every field that can change an output; parallelism cannot."""
        ep = self.endpoint
        return {
            "task": self.task,
            "seed": self.seed,
            "paths": {"corpus": str(self.paths.corpus), "embeddings": str(self.paths.embeddings)},
            "retrieval": {"k": self.retrieval.k, "perspectives": list(self.retrieval.perspectives),
                          "source_only": self.retrieval.source_only},
            "search": {"max_rounds": self.search.max_rounds, "verifier_mode": self.search.verifier_mode,
                       "include_hint_records": self.search.include_hint_records},
            "endpoint": None if ep is None else {"base_url": ep.base_url, "model_name": ep.model_name},
            "generation": self.generation.to_dict(),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, parallelism: int | None = None) -> PipelineConfig:
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, search=replace(cfg.search, rng_seed=seed))
        if parallelism is not None:
            cfg = replace(cfg, parallelism=parallelism)
        return cfg


def interpolate(value: Any, env: Mapping[str, str]) -> Any:
    if isinstance(value, str):
        def sub(m: re.Match) -> str:
            if m.group(1) not in env:
                raise ConfigError(f"environment variable {m.group(1)} is not set")
            return env[m.group(1)]
        return _VAR_RE.sub(sub, value)
    if isinstance(value, list):
        return [interpolate(v, env) for v in value]
    if isinstance(value, dict):
        return {k: interpolate(v, env) for k, v in value.items()}
    return value


def _section(raw: Mapping, name: str) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    return value


def _build(cls, data: dict, name: str, **extra):
    try:
        return cls(**data, **extra)
    except TypeError as exc:
        raise ConfigError(f"bad '{name}' section: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"bad '{name}' section: {exc}") from None


def from_mapping(raw: Mapping, base_dir: Path, env: Mapping[str, str] | None = None,
                 check_inputs: bool = True) -> PipelineConfig:
    raw = interpolate(dict(raw), os.environ if env is None else env)
    unknown = set(raw) - {"task", "paths", "retrieval", "search", "endpoint", "generation", "parallelism", "seed"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "task" not in raw:
        raise ConfigError("config needs a 'task'")
    paths_raw = _section(raw, "paths")
    for key in ("corpus", "embeddings", "outputs"):
        if key not in paths_raw:
            raise ConfigError(f"paths.{key} is required")
    paths = Paths(*(Path(base_dir, paths_raw[k]) for k in ("corpus", "embeddings", "outputs")))
    if check_inputs:
        for p in (paths.corpus, paths.embeddings):
            if not p.is_file():
                raise ConfigError(f"input file not found: {p}")

    seed = int(raw.get("seed", 0))
    retrieval = _section(raw, "retrieval")
    if "perspectives" in retrieval:
        retrieval["perspectives"] = tuple(retrieval["perspectives"])
    generation = _section(raw, "generation")
    if "stop_sequences" in generation:
        generation["stop_sequences"] = tuple(generation["stop_sequences"])
    gen = _build(GenerationParams, generation, "generation")
    search_raw = _section(raw, "search")
    if "rng_seed" in search_raw or "params" in search_raw:
        raise ConfigError("search takes its seed from 'seed' and its params from 'generation'")
    search = _build(SearchConfig, search_raw, "search", rng_seed=seed, params=gen)
    endpoint = _build(ModelEndpoint, _section(raw, "endpoint"), "endpoint") if raw.get("endpoint") else None
    try:
        return PipelineConfig(
            task=str(raw["task"]),
            paths=paths,
            retrieval=_build(RetrievalConfig, retrieval, "retrieval"),
            search=search,
            endpoint=endpoint,
            generation=gen,
            parallelism=int(raw.get("parallelism", 4)),
            seed=seed,
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, env: Mapping[str, str] | None = None, check_inputs: bool = True) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_mapping(raw, path.parent, env, check_inputs)


__all__ = ["ConfigError", "Paths", "PipelineConfig", "from_mapping", "interpolate", "load_config", "PERSPECTIVES"]
