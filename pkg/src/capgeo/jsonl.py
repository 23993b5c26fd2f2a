from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator, Union

from .gateway import _atomic_write

PathLike = Union[str, Path]


def dumps(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


def write_jsonl(path: PathLike, records: Iterable[dict]) -> Path:
    """Write all records at once (temp file + rename) so readers never see a partial file."""
    path = Path(path)
    text = "".join(dumps(r) + "\n" for r in records)
    _atomic_write(path, text.encode("utf-8"))
    return path


def iter_jsonl(path: PathLike) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line


def read_jsonl(path: PathLike) -> list[dict]:
    return [json.loads(line) for _, line in iter_jsonl(path)]
