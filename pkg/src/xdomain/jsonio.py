"""Line-delimited JSON files with file/line diagnostics and atomic writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, TypeVar

from .vectorspace import EmbeddingRecord, LabeledItem, VectorSpaceError

T = TypeVar("T")


class DataFileError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


def dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    if not path.is_file():
        raise DataFileError(path, None, "file not found")
    with path.open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFileError(path, n, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataFileError(path, n, "expected a JSON object")
            yield n, obj


def read_jsonl(path) -> list[dict]:
    return [obj for _, obj in iter_jsonl(path)]


def load_rows(path, build: Callable[[dict], T]) -> list[T]:
    out = []
    for n, obj in iter_jsonl(path):
        try:
            out.append(build(obj))
        except (KeyError, TypeError, ValueError) as exc:
            msg = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
            raise DataFileError(path, n, msg) from None
    return out


def load_corpus(path) -> list[LabeledItem]:
    return load_rows(path, LabeledItem.from_dict)


def load_embeddings(path) -> list[EmbeddingRecord]:
    return load_rows(path, EmbeddingRecord.from_dict)


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_jsonl(path, rows: Iterable[dict]) -> int:
    lines = [dumps(r) + "\n" for r in rows]
    write_text_atomic(path, "".join(lines))
    return len(lines)


def write_json(path, obj: Any) -> None:
    write_text_atomic(path, json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n")


def recover_jsonl(path) -> list[dict]:
    """Rows of an append-only file, dropping a torn final line left by a crash."""
    path = Path(path)
    if not path.exists():
        return []
    raw = path.read_text(encoding="utf-8")
    if raw and not raw.endswith("\n"):
        raw = raw[: raw.rfind("\n") + 1]
        write_text_atomic(path, raw)
    return read_jsonl(path)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


__all__ = [
    "DataFileError", "VectorSpaceError", "dumps", "iter_jsonl", "read_jsonl", "load_rows", "load_corpus",
    "load_embeddings", "write_text_atomic", "write_jsonl", "write_json", "recover_jsonl", "sha256_file",
]
