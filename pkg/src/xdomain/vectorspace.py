"""Per-perspective embedding storage, exact cosine top-k retrieval and
label-agreement similarity statistics."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

PERSPECTIVES = ("sentiment", "semantic", "style")
ORIGINS = ("source", "target")


class VectorSpaceError(ValueError):
    """Base class for retrieval-side failures."""


class DimensionError(VectorSpaceError):
    pass


class DegenerateVectorError(VectorSpaceError):
    pass


class DanglingReferenceError(VectorSpaceError):
    pass


class DuplicateRecordError(VectorSpaceError):
    pass


class InsufficientPoolError(VectorSpaceError):
    pass


class IncompleteEmbeddingError(VectorSpaceError):
    pass


class DegenerateStatisticsError(VectorSpaceError):
    pass


class EmptyInputError(VectorSpaceError):
    pass


@dataclass(frozen=True)
class LabeledItem:
    item_id: str
    text: str
    label: str
    domain: str
    origin: str = "source"

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}, got {self.origin!r}")

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "text": self.text,
            "label": self.label,
            "domain": self.domain,
            "origin": self.origin,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> LabeledItem:
        return cls(
            item_id=str(d["item_id"]),
            text=str(d["text"]),
            label=str(d["label"]),
            domain=str(d["domain"]),
            origin=str(d.get("origin", "source")),
        )


@dataclass(frozen=True)
class EmbeddingRecord:
    """One item's vector in one perspective space.

    Vectors are validated at construction: every component finite and the
    norm non-zero, so cosine similarity is always defined downstream.
    """

    item_id: str
    perspective: str
    vector: tuple[float, ...]

    def __post_init__(self):
        if self.perspective not in PERSPECTIVES:
            raise ValueError(f"unknown perspective {self.perspective!r}")
        vec = tuple(float(v) for v in self.vector)
        if not vec:
            raise DimensionError(f"empty vector for item {self.item_id!r}")
        if not all(math.isfinite(v) for v in vec):
            raise DegenerateVectorError(f"non-finite component in vector for item {self.item_id!r}")
        if not any(vec):
            raise DegenerateVectorError(f"zero vector for item {self.item_id!r} ({self.perspective})")
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return len(self.vector)

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "perspective": self.perspective, "vector": list(self.vector)}

    @classmethod
    def from_dict(cls, d: Mapping) -> EmbeddingRecord:
        return cls(item_id=str(d["item_id"]), perspective=str(d["perspective"]), vector=tuple(d["vector"]))


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 2
    perspectives: tuple[str, ...] = PERSPECTIVES
    source_only: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        persp = tuple(self.perspectives)
        if not persp:
            raise ValueError("perspectives must be non-empty")
        if len(set(persp)) != len(persp):
            raise ValueError("perspectives must not repeat")
        for p in persp:
            if p not in PERSPECTIVES:
                raise ValueError(f"unknown perspective {p!r}")
        object.__setattr__(self, "perspectives", persp)


@dataclass(frozen=True)
class Neighbor:
    item: LabeledItem
    similarity: float


@dataclass(frozen=True)
class RetrievedContext:
    """A target item bundled with its top-k labeled neighbors per perspective."""

    target: LabeledItem
    neighbors: Mapping[str, tuple[Neighbor, ...]]
    task: str

    @property
    def item_id(self) -> str:
        return self.target.item_id

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "target": self.target.to_dict(),
            "neighbors": {
                p: [{"item": n.item.to_dict(), "similarity": n.similarity} for n in ns]
                for p, ns in self.neighbors.items()
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> RetrievedContext:
        neighbors = {
            p: tuple(Neighbor(LabeledItem.from_dict(n["item"]), float(n["similarity"])) for n in ns)
            for p, ns in d["neighbors"].items()
        }
        return cls(target=LabeledItem.from_dict(d["target"]), neighbors=neighbors, task=str(d["task"]))


@dataclass(frozen=True)
class SimilarityStats:
    group_a_mean: float
    group_b_mean: float
    t_statistic: float
    p_value: float
    top_k: int | None = None


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class _Space:
    ids: tuple[str, ...]
    matrix: np.ndarray  # rows are L2-normalised, read-only
    row_of: Mapping[str, int]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


class PerspectiveIndex:
    """Immutable exact-scan index over labeled items, one space per perspective.

    Safe to share across query threads once built.
    """

    def __init__(self, items: Mapping[str, LabeledItem], spaces: Mapping[str, _Space]):
        self._items = MappingProxyType(dict(items))
        self._spaces = MappingProxyType(dict(spaces))

    @property
    def items(self) -> Mapping[str, LabeledItem]:
        return self._items

    @property
    def perspectives(self) -> tuple[str, ...]:
        return tuple(self._spaces)

    def count(self, perspective: str) -> int:
        space = self._spaces.get(perspective)
        return 0 if space is None else len(space.ids)

    def counts(self) -> dict[str, int]:
        return {p: len(s.ids) for p, s in self._spaces.items()}

    def dim(self, perspective: str) -> int:
        return self._space(perspective).dim

    def has(self, item_id: str, perspective: str) -> bool:
        space = self._spaces.get(perspective)
        return space is not None and item_id in space.row_of

    def unit_vector(self, item_id: str, perspective: str) -> np.ndarray:
        space = self._space(perspective)
        if item_id not in space.row_of:
            raise IncompleteEmbeddingError(f"no {perspective} embedding for item {item_id!r}")
        return space.matrix[space.row_of[item_id]]

    def _space(self, perspective: str) -> _Space:
        try:
            return self._spaces[perspective]
        except KeyError:
            raise IncompleteEmbeddingError(f"index has no {perspective!r} embeddings") from None


def build_index(records: Iterable[EmbeddingRecord], items: Iterable[LabeledItem]) -> PerspectiveIndex:
    by_id: dict[str, LabeledItem] = {}
    for item in items:
        if item.item_id in by_id:
            raise DuplicateRecordError(f"duplicate item_id {item.item_id!r} in corpus")
        by_id[item.item_id] = item

    grouped: dict[str, list[EmbeddingRecord]] = {}
    seen: set[tuple[str, str]] = set()
    for rec in records:
        if rec.item_id not in by_id:
            raise DanglingReferenceError(f"embedding references unknown item_id {rec.item_id!r}")
        key = (rec.item_id, rec.perspective)
        if key in seen:
            raise DuplicateRecordError(f"more than one {rec.perspective} record for item {rec.item_id!r}")
        seen.add(key)
        group = grouped.setdefault(rec.perspective, [])
        if group and group[0].dim != rec.dim:
            raise DimensionError(
                f"inconsistent {rec.perspective} dim: {group[0].dim} vs {rec.dim} (item {rec.item_id!r})"
            )
        group.append(rec)

    spaces = {}
    for perspective in PERSPECTIVES:
        group = grouped.get(perspective)
        if not group:
            continue
        mat = np.array([r.vector for r in group], dtype=np.float64)
        mat /= np.linalg.norm(mat, axis=1, keepdims=True)
        mat.setflags(write=False)
        ids = tuple(r.item_id for r in group)
        spaces[perspective] = _Space(ids, mat, MappingProxyType({i: n for n, i in enumerate(ids)}))
    return PerspectiveIndex(by_id, spaces)


def _ranked(index: PerspectiveIndex, perspective: str, unit_query: np.ndarray,
            keep: Callable[[LabeledItem], bool] | None) -> tuple[list[str], np.ndarray]:
    space = index._space(perspective)
    if unit_query.shape[0] != space.dim:
        raise DimensionError(f"query dim {unit_query.shape[0]} != {perspective} dim {space.dim}")
    # Row-wise reduction (not BLAS gemv) so identical rows give bit-identical scores.
    sims = np.clip((space.matrix * unit_query).sum(axis=1), -1.0, 1.0)
    if keep is None:
        rows = np.arange(len(space.ids))
    else:
        rows = np.array([n for n, i in enumerate(space.ids) if keep(index.items[i])], dtype=np.int64)
    if len(rows) == 0:
        return [], np.empty(0)
    ids = np.asarray(space.ids)[rows]
    cand = sims[rows]
    order = np.lexsort((ids, -cand))
    return ids[order].tolist(), cand[order]


def topk(index: PerspectiveIndex, query: EmbeddingRecord, k: int,
         keep: Callable[[LabeledItem], bool] | None = None) -> list[Neighbor]:
    """Exact top-k by cosine similarity; ties go to the smaller item_id.

    ``keep`` filters candidates (e.g. source-only, exclude the query item).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query.vector, dtype=np.float64)
    q = q / np.linalg.norm(q)
    ids, sims = _ranked(index, query.perspective, q, keep)
    if len(ids) < k:
        raise InsufficientPoolError(
            f"{query.perspective}: need {k} candidates, only {len(ids)} pass the filter (short by {k - len(ids)})"
        )
    return [Neighbor(index.items[i], float(s)) for i, s in zip(ids[:k], sims[:k])]


def assemble_contexts(targets: Sequence[LabeledItem], index: PerspectiveIndex,
                      config: RetrievalConfig, task: str) -> list[RetrievedContext]:
    contexts = []
    for target in targets:
        def keep(item: LabeledItem, _tid=target.item_id) -> bool:
            if item.item_id == _tid:
                return False
            return item.origin == "source" or not config.source_only

        neighbors = {}
        for perspective in config.perspectives:
            if not index.has(target.item_id, perspective):
                raise IncompleteEmbeddingError(f"target {target.item_id!r} has no {perspective} embedding")
            unit = index.unit_vector(target.item_id, perspective)
            ids, sims = _ranked(index, perspective, unit, keep)
            if len(ids) < config.k:
                raise InsufficientPoolError(
                    f"{perspective}: need {config.k} neighbors for {target.item_id!r}, "
                    f"only {len(ids)} available (short by {config.k - len(ids)})"
                )
            neighbors[perspective] = tuple(
                Neighbor(index.items[i], float(s)) for i, s in zip(ids[:config.k], sims[:config.k])
            )
        contexts.append(RetrievedContext(target=target, neighbors=neighbors, task=task))
    return contexts


def split_ra(contexts: Sequence[RetrievedContext], seed: int) -> tuple[list[RetrievedContext], list[RetrievedContext]]:
    """Seeded shuffle, then alternate: even positions to search, odd to RL."""
    if not contexts:
        raise EmptyInputError("cannot split an empty context list")
    order = list(range(len(contexts)))
    random.Random(seed).shuffle(order)
    search = [contexts[i] for i in order[0::2]]
    rl = [contexts[i] for i in order[1::2]]
    return search, rl


def welch_ttest(sample_a: Sequence[float], sample_b: Sequence[float], top_k: int | None = None) -> SimilarityStats:
    """Two-sided Welch t-test (unequal variances)."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DegenerateStatisticsError(f"need >= 2 observations per sample, got {a.size} and {b.size}")
    ma, mb = float(a.mean()), float(b.mean())
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    sa, sb = va / a.size, vb / b.size
    if sa + sb == 0.0:
        raise DegenerateStatisticsError("both samples have zero variance")
    t = (ma - mb) / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa**2 / (a.size - 1) + sb**2 / (b.size - 1))
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))
    return SimilarityStats(ma, mb, float(t), p, top_k)


@dataclass
class AgreementTable:
    """Mean top-k cross-domain similarity per ordered label pair, plus
    Welch tests of A->A against A->B.  Missing cells hold ``None``."""

    perspective: str
    top_k_values: tuple[int, ...]
    labels: tuple[str, ...]
    means: dict[tuple[str, str, int], float | None] = field(default_factory=dict)
    samples: dict[tuple[str, str, int], np.ndarray] = field(default_factory=dict, repr=False)
    tests: dict[tuple[str, str, int], SimilarityStats | None] = field(default_factory=dict)

    def pairs(self) -> list[tuple[str, str]]:
        out = []
        for a in self.labels:
            out.append((a, a))
            out.extend((a, b) for b in self.labels if b != a)
        return out

    def format(self, digits: int = 2) -> str:
        header = ["pair"] + [f"top{k}" for k in self.top_k_values]
        rows = [header]

        def cell(v):
            return "-" if v is None else f"{v:.{digits}f}"

        for a in self.labels:
            rows.append([f"{a}->{a}"] + [cell(self.means.get((a, a, k))) for k in self.top_k_values])
            for b in self.labels:
                if b == a:
                    continue
                rows.append([f"{a}->{b}"] + [cell(self.means.get((a, b, k))) for k in self.top_k_values])
                tests = [self.tests.get((a, b, k)) for k in self.top_k_values]
                rows.append(["t"] + [cell(None if s is None else s.t_statistic) for s in tests])
                rows.append(["p"] + [cell(None if s is None else s.p_value) for s in tests])
        widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows)


def label_agreement_table(index: PerspectiveIndex, items: Sequence[LabeledItem],
                          top_k_values: Sequence[int], perspective: str) -> AgreementTable:
    """For every item of label A, score it against all items of label B in
    *other* domains, keep each row's top-k scores, and pool them.

    A->A vs A->B is then a Welch test on the pooled samples.
    """
    ks = tuple(int(k) for k in top_k_values)
    if not ks or min(ks) < 1:
        raise ValueError("top_k_values must be positive integers")
    domains = {it.domain for it in items}
    if len(domains) < 2:
        raise EmptyInputError("label agreement needs items from at least two domains")
    labels = tuple(sorted({it.label for it in items}))
    table = AgreementTable(perspective=perspective, top_k_values=ks, labels=labels)

    ids = [it.item_id for it in items]
    mat = np.stack([index.unit_vector(i, perspective) for i in ids])
    sims = np.clip(mat @ mat.T, -1.0, 1.0)
    dom = np.array([it.domain for it in items])
    lab = np.array([it.label for it in items])

    for a in labels:
        rows_a = np.flatnonzero(lab == a)
        for b in labels:
            cols_b = lab == b
            pooled: dict[int, list[np.ndarray]] = {k: [] for k in ks}
            for r in rows_a:
                cols = np.flatnonzero(cols_b & (dom != dom[r]))
                if cols.size == 0:
                    continue
                row = np.sort(sims[r, cols])[::-1]
                for k in ks:
                    pooled[k].append(row[:k])
            for k in ks:
                if pooled[k]:
                    sample = np.concatenate(pooled[k])
                    table.samples[(a, b, k)] = sample
                    table.means[(a, b, k)] = float(sample.mean())
                else:
                    table.means[(a, b, k)] = None

    for a in labels:
        for b in labels:
            if a == b:
                continue
            for k in ks:
                same, other = table.samples.get((a, a, k)), table.samples.get((a, b, k))
                if same is None or other is None:
                    table.tests[(a, b, k)] = None
                    continue
                try:
                    table.tests[(a, b, k)] = welch_ttest(same, other, top_k=k)
                except DegenerateStatisticsError:
                    table.tests[(a, b, k)] = None
    return table
