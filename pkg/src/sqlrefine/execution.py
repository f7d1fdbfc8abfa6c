"""Read-only SQLite execution and execution-equivalence checks."""

from __future__ import annotations

import math
import sqlite3
import threading
import time
from dataclasses import dataclass
from functools import cmp_to_key
from pathlib import Path
from typing import Any, Optional, Sequence

DEFAULT_TIMEOUT_MS = 30_000
DEFAULT_LOOKUP_LIMIT = 10_000
FLOAT_REL_TOL = 1e-6


class DatabaseIOError(OSError):
    pass


class CorruptDatabaseError(RuntimeError):
    pass


class UnknownColumn(KeyError):
    pass


@dataclass(frozen=True)
class ValueDomain:
    values: tuple
    truncated: bool = False

    def __contains__(self, item) -> bool:
        return item in self.values

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ExecOutcome:
    status: str  # rows, error, timeout
    rows: tuple = ()
    error_message: str = ""
    elapsed_ms: float = 0.0
    ncols: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "rows"

    def feedback(self, max_rows: int = 5) -> str:
        """Short textual form used as execution feedback in model inputs."""
        if self.status == "error":
            return f"ERROR: {self.error_message}"
        if self.status == "timeout":
            return "TIMEOUT"
        shown = [repr(tuple(r)) for r in self.rows[:max_rows]]
        more = len(self.rows) - len(shown)
        head = f"{len(self.rows)} row(s)"
        if more > 0:
            shown.append(f"... ({more} more)")
        return head + ("\n" + "\n".join(shown) if shown else "")


class Database:
    """A read-only handle on one SQLite file.

    Connections are opened per thread, so one ``Database`` may be shared by a
    worker pool without sharing sqlite3 connection objects across threads.
    """

    def __init__(self, path, db_id: Optional[str] = None):
        self.path = Path(path)
        self.db_id = db_id or self.path.stem
        if not self.path.is_file():
            raise DatabaseIOError(f"database file not found: {self.path}")
        self._local = threading.local()
        self._lookup_cache: dict = {}
        self._lock = threading.Lock()
        try:
            self.connection().execute("SELECT name FROM sqlite_master LIMIT 1").fetchall()
        except sqlite3.DatabaseError as exc:
            raise CorruptDatabaseError(f"{self.path}: {exc}") from exc

    def connection(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            uri = f"file:{self.path.resolve().as_posix()}?mode=ro"
            try:
                conn = sqlite3.connect(uri, uri=True, check_same_thread=False)
            except sqlite3.Error as exc:
                raise DatabaseIOError(f"cannot open {self.path}: {exc}") from exc
            conn.text_factory = lambda b: b.decode("utf-8", errors="replace")
            self._local.conn = conn
        return conn

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None

    def lookup_values(self, table: str, column: str,
                      limit: int = DEFAULT_LOOKUP_LIMIT) -> ValueDomain:
        """Distinct non-null values of ``table.column`` in ascending order."""
        key = (table.casefold(), column.casefold(), limit)
        with self._lock:
            cached = self._lookup_cache.get(key)
        if cached is not None:
            return cached
        # an unknown double-quoted name would silently become a string literal
        info = self.connection().execute(f'PRAGMA table_info("{_esc(table)}")').fetchall()
        if not any(r[1].casefold() == column.casefold() for r in info):
            raise UnknownColumn(f"{table}.{column}")
        sql = (f'SELECT DISTINCT "{_esc(column)}" FROM "{_esc(table)}" '
               f'WHERE "{_esc(column)}" IS NOT NULL ORDER BY 1 LIMIT {int(limit) + 1}')
        try:
            rows = self.connection().execute(sql).fetchall()
        except sqlite3.OperationalError as exc:
            raise UnknownColumn(f"{table}.{column}: {exc}") from exc
        values = tuple(r[0] for r in rows[:limit])
        domain = ValueDomain(values, truncated=len(rows) > limit)
        with self._lock:
            self._lookup_cache[key] = domain
        return domain


def _esc(name: str) -> str:
    return name.replace('"', '""')


def lookup_values(column: tuple[str, str], db: Database,
                  limit: int = DEFAULT_LOOKUP_LIMIT) -> ValueDomain:
    return db.lookup_values(column[0], column[1], limit)


def execute(sql: str, db: Database, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ExecOutcome:
    """Run ``sql`` read-only; failures and timeouts are encoded in the outcome."""
    conn = db.connection()
    deadline = time.monotonic() + timeout_ms / 1000.0
    timed_out = False

    def progress() -> int:
        nonlocal timed_out
        if time.monotonic() > deadline:
            timed_out = True
            return 1
        return 0

    conn.set_progress_handler(progress, 1000)
    start = time.perf_counter()
    try:
        cur = conn.execute(sql)
        rows = tuple(tuple(r) for r in cur.fetchall())
        ncols = len(cur.description) if cur.description else 0
    except (sqlite3.Error, sqlite3.Warning, ValueError, OverflowError) as exc:
        elapsed = (time.perf_counter() - start) * 1000
        if timed_out:
            return ExecOutcome("timeout", elapsed_ms=elapsed)
        return ExecOutcome("error", error_message=str(exc), elapsed_ms=elapsed)
    finally:
        conn.set_progress_handler(None, 0)
    return ExecOutcome("rows", rows, elapsed_ms=(time.perf_counter() - start) * 1000, ncols=ncols)


def _type_rank(v: Any) -> int:
    if v is None:
        return 0
    if isinstance(v, (int, float)):
        return 1
    if isinstance(v, str):
        return 2
    return 3


def _cmp_values(a: Any, b: Any) -> int:
    ra, rb = _type_rank(a), _type_rank(b)
    if ra != rb:
        return -1 if ra < rb else 1
    if ra == 0:
        return 0
    if ra == 3:
        a, b = bytes(a), bytes(b)
    return -1 if a < b else (1 if a > b else 0)


def _cmp_rows(r1: Sequence, r2: Sequence) -> int:
    for a, b in zip(r1, r2):
        c = _cmp_values(a, b)
        if c:
            return c
    return (len(r1) > len(r2)) - (len(r1) < len(r2))


def values_equal(a: Any, b: Any) -> bool:
    if a is None or b is None:
        return a is None and b is None
    num_a, num_b = isinstance(a, (int, float)), isinstance(b, (int, float))
    if num_a and num_b:
        return a == b or math.isclose(a, b, rel_tol=FLOAT_REL_TOL)
    if num_a or num_b:
        return False
    return a == b


def _as_number(text: str):
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return None


def value_in_domain(value: str, literal_type: str, domain: ValueDomain) -> bool:
    """Whether a SQL literal (as parsed text) equals some stored value."""
    num = _as_number(value) if literal_type in ("number", "string") else None
    for dv in domain.values:
        if isinstance(dv, str):
            if dv == value:
                return True
        elif isinstance(dv, (int, float)) and num is not None and values_equal(dv, num):
            return True
    return False


def rows_equal(r1: Sequence, r2: Sequence) -> bool:
    return len(r1) == len(r2) and all(values_equal(a, b) for a, b in zip(r1, r2))


def exec_equivalent(a: ExecOutcome, b: ExecOutcome, order_sensitive: bool = False) -> bool:
    """True iff both outcomes are row sets that match as bags (or sequences)."""
    if not (a.ok and b.ok):
        return False
    if len(a.rows) != len(b.rows):
        return False
    if a.rows and b.rows and len(a.rows[0]) != len(b.rows[0]):
        return False
    if not a.rows and a.ncols and b.ncols and a.ncols != b.ncols:
        return False
    left, right = list(a.rows), list(b.rows)
    if not order_sensitive:
        key = cmp_to_key(_cmp_rows)
        left.sort(key=key)
        right.sort(key=key)
    return all(rows_equal(x, y) for x, y in zip(left, right))


def order_matters(gold_sql: str) -> bool:
    """Whether the gold query has a top-level ORDER BY."""
    from .sqlast import ParseError, parse_sql

    try:
        ast = parse_sql(gold_sql)
    except ParseError:
        return " order by " in " ".join(gold_sql.lower().split())
    return any(c.kind == "order_by" for c in ast.children(ast.root))


def open_database(db_root, db_id: str) -> Database:
    """Locate ``db_id`` under ``db_root`` using the BIRD/Spider directory layout."""
    root = Path(db_root)
    for candidate in (root / db_id / f"{db_id}.sqlite", root / f"{db_id}.sqlite",
                      root / db_id / f"{db_id}.db", root / f"{db_id}.db"):
        if candidate.is_file():
            return Database(candidate, db_id)
    raise DatabaseIOError(f"no database {db_id!r} under {root}")


class DatabasePool:
    """Caches one :class:`Database` per db_id."""

    def __init__(self, db_root):
        self.db_root = Path(db_root)
        self._dbs: dict[str, Database] = {}
        self._lock = threading.Lock()

    def get(self, db_id: str) -> Database:
        with self._lock:
            db = self._dbs.get(db_id)
            if db is None:
                db = self._dbs[db_id] = open_database(self.db_root, db_id)
            return db
