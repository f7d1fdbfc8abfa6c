"""Corpus rows, samples, and JSONL helpers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

REQUIRED_CORPUS_FIELDS = ("question_id", "db_id", "question", "gold_sql")


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    """One SQL to check: the question, its database, and the SQL under test."""

    question_id: str
    db_id: str
    question: str
    sql: str
    gold_sql: Optional[str] = None
    labels: tuple[str, ...] = ()
    mutation_log: tuple = ()
    source: str = ""
    sample_id: str = ""

    @property
    def key(self) -> str:
        return self.sample_id or self.question_id


def read_jsonl(path) -> list[dict]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    return rows


def dumps_jsonl(rows: Iterable[dict]) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows)


def write_jsonl(path, rows: Iterable[dict]) -> None:
    Path(path).write_text(dumps_jsonl(rows), encoding="utf-8")


def read_corpus(path) -> list[dict]:
    rows = read_jsonl(path)
    for i, row in enumerate(rows):
        missing = [f for f in REQUIRED_CORPUS_FIELDS if f not in row]
        if missing:
            raise CorpusFormatError(f"row {i} lacks {', '.join(missing)}")
    return rows


def sample_from_row(row: dict) -> Sample:
    """Build a Sample from a corpus or dataset row.

    Dataset rows carry ``sql``; corpus rows carry ``predicted_sql`` (falling
    back to the gold SQL when absent).
    """
    sql = row.get("sql") or row.get("predicted_sql") or row["gold_sql"]
    log = tuple(tuple(m) if isinstance(m, (list, tuple)) else
                (m["node_id"], m["before"], m["after"], m.get("label", ""))
                for m in row.get("mutation_log", ()))
    return Sample(str(row["question_id"]), row["db_id"], row["question"], sql,
                  row.get("gold_sql"), tuple(row.get("labels", ())), log,
                  row.get("source", ""), row.get("sample_id", ""))


def sample_to_dict(sample: Sample) -> dict:
    d = asdict(sample)
    d["labels"] = list(sample.labels)
    d["mutation_log"] = [list(m) for m in sample.mutation_log]
    return d
