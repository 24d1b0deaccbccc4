import csv
import json
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from pydantic import BaseModel

from src.edge.errors import DataError


def ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def read_text(path: str | Path) -> str:
    p = Path(path).expanduser()
    if not p.exists():
        raise DataError(f"file not found: {p}")
    return p.read_text(encoding="utf-8")


def write_model(path: str | Path, model: BaseModel) -> Path:
    """
    Write a pydantic model as pretty JSON (aliases on, stable key order).
    """
    p = Path(path)
    ensure_parent(p)
    p.write_text(model.model_dump_json(by_alias=True, indent=2) + "\n", encoding="utf-8")
    return p


def write_json(path: str | Path, obj: Any) -> Path:
    p = Path(path)
    ensure_parent(p)
    p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return p


def iter_jsonl_lines(path: str | Path) -> Iterator[tuple[int, str]]:
    """
    Yield (1-based line number, raw line) for every non-blank line.
    """
    p = Path(path).expanduser()
    if not p.exists():
        raise DataError(f"file not found: {p}")
    with p.open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if line.strip():
                yield i, line


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    p = Path(path)
    ensure_parent(p)
    written = 0
    with p.open("w", encoding="utf-8") as out:
        for rec in records:
            out.write(json.dumps(rec, ensure_ascii=False) + "\n")
            written += 1
    return written


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    p = Path(path)
    ensure_parent(p)
    with p.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt_cell(x) for x in r])
    return p


def fmt_cell(x: Any) -> str:
    # fixed float formatting keeps reruns byte-identical
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)
