"""Schema graph introspection, value linking, and question-schema structures."""

from __future__ import annotations

import csv
import json
import re
import sqlite3
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

from .execution import DEFAULT_LOOKUP_LIMIT, CorruptDatabaseError, Database
from .sqlast import SqlAst, enclosing_query, resolve_qualifier, unquote_identifier

EXAMPLE_VALUES = 3
DEFAULT_FUZZY_THRESHOLD = 0.85
MAX_SPAN_WORDS = 6


class UnresolvedLinkTarget(KeyError):
    pass


@dataclass(frozen=True)
class Table:
    name: str
    description: Optional[str] = None


@dataclass(frozen=True)
class Column:
    table: str
    name: str
    type: str = ""
    description: Optional[str] = None
    examples: tuple = ()
    primary_key: bool = False

    @property
    def qualified(self) -> str:
        return f"{self.table}.{self.name}"


@dataclass(frozen=True)
class Edge:
    kind: str  # has_column, primary_key_of, foreign_key_to
    source: str
    target: str


def table_node(name: str) -> str:
    return f"table:{name}"


def column_node(table: str, name: str) -> str:
    return f"column:{table}.{name}"


@dataclass(frozen=True)
class SchemaGraph:
    db_id: str = ""
    tables: tuple[Table, ...] = ()
    columns: tuple[Column, ...] = ()
    edges: tuple[Edge, ...] = ()

    def table(self, name: str) -> Optional[Table]:
        key = name.casefold()
        return next((t for t in self.tables if t.name.casefold() == key), None)

    def columns_of(self, table: str) -> list[Column]:
        key = table.casefold()
        return [c for c in self.columns if c.table.casefold() == key]

    def column(self, table: str, name: str) -> Optional[Column]:
        tk, ck = table.casefold(), name.casefold()
        return next((c for c in self.columns
                     if c.table.casefold() == tk and c.name.casefold() == ck), None)

    def tables_with_column(self, name: str, among: Optional[Iterable[str]] = None) -> list[str]:
        ck = name.casefold()
        allowed = None if among is None else {t.casefold() for t in among}
        return [c.table for c in self.columns if c.name.casefold() == ck
                and (allowed is None or c.table.casefold() in allowed)]

    def foreign_keys(self) -> list[tuple[Column, Column]]:
        """(referencing column, referenced column) pairs, one per relationship.

        Both directions are stored as edges; the declared direction is the
        one inserted first.
        """
        out, seen = [], set()
        for e in self.edges:
            if e.kind != "foreign_key_to" or frozenset((e.source, e.target)) in seen:
                continue
            src, dst = self._column_by_node(e.source), self._column_by_node(e.target)
            if src is None or dst is None:
                continue
            seen.add(frozenset((e.source, e.target)))
            out.append((src, dst))
        return out

    def _column_by_node(self, node: str) -> Optional[Column]:
        for c in self.columns:
            if column_node(c.table, c.name) == node:
                return c
        return None

    @property
    def node_ids(self) -> set[str]:
        return ({table_node(t.name) for t in self.tables}
                | {column_node(c.table, c.name) for c in self.columns})

    def to_json(self) -> dict:
        return {
            "db_id": self.db_id,
            "tables": [{"name": t.name, "description": t.description} for t in self.tables],
            "columns": [{"table": c.table, "name": c.name, "type": c.type,
                         "description": c.description, "examples": list(c.examples),
                         "primary_key": c.primary_key} for c in self.columns],
            "edges": [{"kind": e.kind, "source": e.source, "target": e.target} for e in self.edges],
        }


def _load_descriptions(db_path: Path) -> dict[tuple[str, str], str]:
    """BIRD ships per-table CSVs under ``database_description/``; optional."""
    desc_dir = db_path.parent / "database_description"
    out: dict[tuple[str, str], str] = {}
    if not desc_dir.is_dir():
        return out
    for f in sorted(desc_dir.glob("*.csv")):
        try:
            with f.open(encoding="utf-8-sig", errors="replace", newline="") as fh:
                for row in csv.DictReader(fh):
                    col = (row.get("original_column_name") or "").strip()
                    text = (row.get("column_description") or "").strip()
                    if col and text:
                        out[(f.stem.casefold(), col.casefold())] = text
        except (OSError, csv.Error):
            continue
    return out


def introspect_schema(db_path, k: int = EXAMPLE_VALUES) -> SchemaGraph:
    """Build the deterministic schema graph of a SQLite file."""
    db = db_path if isinstance(db_path, Database) else Database(db_path)
    conn = db.connection()
    descriptions = _load_descriptions(db.path)
    try:
        names = [r[0] for r in conn.execute(
            "SELECT name FROM sqlite_master WHERE type = 'table' "
            "AND name NOT LIKE 'sqlite_%' ORDER BY name")]
        tables, columns, edges = [], [], []
        pk_edges, fk_edges = [], []
        for t in names:
            tables.append(Table(t))
            info = conn.execute(f'PRAGMA table_info("{t.replace(chr(34), chr(34) * 2)}")').fetchall()
            for _cid, cname, ctype, _notnull, _default, pk in info:
                examples = ()
                if k > 0:
                    examples = tuple(r[0] for r in conn.execute(
                        f'SELECT DISTINCT "{cname}" FROM "{t}" WHERE "{cname}" IS NOT NULL '
                        f'ORDER BY 1 LIMIT {int(k)}'))
                columns.append(Column(t, cname, ctype or "", descriptions.get((t.casefold(), cname.casefold())),
                                      examples, bool(pk)))
                edges.append(Edge("has_column", table_node(t), column_node(t, cname)))
                if pk:
                    pk_edges.append(Edge("primary_key_of", column_node(t, cname), table_node(t)))
            for row in conn.execute(f'PRAGMA foreign_key_list("{t}")').fetchall():
                ref_table, src_col, ref_col = row[2], row[3], row[4]
                if ref_col is None:
                    pk_cols = [r[1] for r in conn.execute(f'PRAGMA table_info("{ref_table}")') if r[5]]
                    ref_col = pk_cols[0] if pk_cols else None
                if ref_col is None:
                    continue
                fk_edges.append((t, src_col, ref_table, ref_col))
    except sqlite3.DatabaseError as exc:
        raise CorruptDatabaseError(str(exc)) from exc
    edges.extend(pk_edges)
    by_key = {(c.table.casefold(), c.name.casefold()): c for c in columns}
    for t, src, rt, rc in fk_edges:
        a, b = by_key.get((t.casefold(), src.casefold())), by_key.get((rt.casefold(), rc.casefold()))
        if a is None or b is None:
            continue
        fwd = Edge("foreign_key_to", column_node(a.table, a.name), column_node(b.table, b.name))
        rev = Edge("foreign_key_to", fwd.target, fwd.source)
        for e in (fwd, rev):
            if e not in edges:
                edges.append(e)
    return SchemaGraph(db.db_id, tuple(tables), tuple(columns), tuple(edges))


# --------------------------------------------------------------------------
# Question tokens and fuzzy matching

def question_tokens(question: str) -> list[tuple[str, int, int]]:
    """(text, start, end) for each word token of the question."""
    return [(m.group(), m.start(), m.end()) for m in re.finditer(r"\w+(?:'\w+)?", question)]


def levenshtein(a: str, b: str) -> int:
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def fuzzy_ratio(a: str, b: str) -> float:
    """1 - normalized Levenshtein distance of the case-folded strings."""
    a, b = a.casefold(), b.casefold()
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


@dataclass(frozen=True)
class LinkEdge:
    kind: str  # q_to_table, q_to_column, value_match
    span: str
    start: int
    end: int
    target: str  # schema node id
    value: Optional[str] = None


def link_values(question: str, schema: SchemaGraph, db: Database,
                threshold: float = DEFAULT_FUZZY_THRESHOLD,
                limit: int = DEFAULT_LOOKUP_LIMIT) -> list[LinkEdge]:
    """Fuzzy-match question spans against text cell values of every column."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    toks = question_tokens(question)
    spans: dict[int, list[tuple[str, int, int]]] = {}
    for i in range(len(toks)):
        for j in range(i, min(len(toks), i + MAX_SPAN_WORDS)):
            s, e = toks[i][1], toks[j][2]
            spans.setdefault(j - i + 1, []).append((question[s:e], s, e))
    matches: list[LinkEdge] = []
    for col in schema.columns:
        try:
            domain = db.lookup_values(col.table, col.name, limit)
        except KeyError:
            continue
        for value in domain.values:
            if not isinstance(value, str) or not value.strip():
                continue
            nwords = len(question_tokens(value)) or 1
            vf = value.casefold()
            for width in {max(1, nwords - 1), nwords, nwords + 1}:
                for text, s, e in spans.get(width, ()):
                    tf = text.casefold()
                    longest = max(len(tf), len(vf))
                    if abs(len(tf) - len(vf)) > (1 - threshold) * longest:
                        continue
                    if fuzzy_ratio(tf, vf) >= threshold:
                        matches.append(LinkEdge("value_match", text, s, e,
                                                column_node(col.table, col.name), value))
    matches.sort(key=lambda m: (m.start, m.end, m.target, str(m.value)))
    return list(dict.fromkeys(matches))


# --------------------------------------------------------------------------
# External schema linking and QSS


@dataclass(frozen=True)
class SchemaLinkingResult:
    tables: tuple[str, ...] = ()
    columns: tuple[tuple[str, str], ...] = ()
    assignments: tuple[tuple[str, tuple[str, ...]], ...] = ()  # span -> schema names

    @classmethod
    def from_json(cls, payload) -> "SchemaLinkingResult":
        if isinstance(payload, (str, Path)):
            payload = json.loads(Path(payload).read_text(encoding="utf-8"))
        assignments = tuple((span, tuple(targets))
                            for span, targets in (payload.get("assignments") or {}).items())
        return cls(tuple(payload.get("tables", ())),
                   tuple(tuple(c) for c in payload.get("columns", ())), assignments)


@dataclass(frozen=True)
class QuestionSchemaStructure:
    question: str
    question_nodes: tuple[tuple[str, int, int], ...]
    schema: SchemaGraph
    link_edges: tuple[LinkEdge, ...] = ()
    full_schema: Optional[SchemaGraph] = None  # the unpruned graph, for name resolution

    @property
    def resolution_schema(self) -> SchemaGraph:
        return self.full_schema or self.schema


def _singular(word: str) -> str:
    w = word.casefold()
    if len(w) > 4 and w.endswith("ies"):
        return w[:-3] + "y"
    if len(w) > 3 and w.endswith("s") and not w.endswith("ss"):
        return w[:-1]
    return w


def _name_words(name: str) -> list[str]:
    spaced = re.sub(r"([a-z0-9])([A-Z])", r"\1 \2", name)
    return [_singular(w) for w in re.split(r"[^0-9A-Za-z]+", spaced) if w]


def prune_schema(schema: SchemaGraph, tables: Iterable[str],
                 columns: Iterable[tuple[str, str]]) -> SchemaGraph:
    """Keep linked tables/columns plus PK columns and FK columns joining kept tables."""
    keep_t = {t.casefold() for t in tables}
    keep_c = {(t.casefold(), c.casefold()) for t, c in columns}
    keep_t |= {t for t, _ in keep_c}
    for c in schema.columns:
        if c.table.casefold() in keep_t and c.primary_key:
            keep_c.add((c.table.casefold(), c.name.casefold()))
    for a, b in schema.foreign_keys():
        if a.table.casefold() in keep_t and b.table.casefold() in keep_t:
            keep_c.add((a.table.casefold(), a.name.casefold()))
            keep_c.add((b.table.casefold(), b.name.casefold()))
    tables_kept = tuple(t for t in schema.tables if t.name.casefold() in keep_t)
    cols_kept = tuple(c for c in schema.columns if (c.table.casefold(), c.name.casefold()) in keep_c)
    nodes = {table_node(t.name) for t in tables_kept} | {column_node(c.table, c.name) for c in cols_kept}
    edges = tuple(e for e in schema.edges if e.source in nodes and e.target in nodes)
    return SchemaGraph(schema.db_id, tables_kept, cols_kept, edges)


def _resolve_name(schema: SchemaGraph, name: str) -> str:
    if "." in name:
        t, c = name.split(".", 1)
        col = schema.column(t, c)
        if col is None:
            raise UnresolvedLinkTarget(name)
        return column_node(col.table, col.name)
    tab = schema.table(name)
    if tab is None:
        raise UnresolvedLinkTarget(name)
    return table_node(tab.name)


def name_match_links(question: str, schema: SchemaGraph) -> list[LinkEdge]:
    """Exact and word-subset matches between question spans and schema names."""
    toks = question_tokens(question)
    words = [_singular(t[0]) for t in toks]
    edges: list[LinkEdge] = []

    def find(seq: list[str]) -> list[tuple[int, int]]:
        n = len(seq)
        return [(i, i + n - 1) for i in range(len(words) - n + 1) if words[i:i + n] == seq]

    for t in schema.tables:
        for i, j in find(_name_words(t.name)):
            edges.append(LinkEdge("q_to_table", question[toks[i][1]:toks[j][2]],
                                  toks[i][1], toks[j][2], table_node(t.name)))
    for c in schema.columns:
        cw = _name_words(c.name)
        hits = find(cw) or find(_name_words(c.table) + cw)
        if not hits and len(cw) > 1 and all(w in words for w in cw):
            first = min(words.index(w) for w in cw)
            last = max(words.index(w) for w in cw)
            hits = [(first, last)]
        for i, j in hits:
            edges.append(LinkEdge("q_to_column", question[toks[i][1]:toks[j][2]],
                                  toks[i][1], toks[j][2], column_node(c.table, c.name)))
    return edges


def build_qss(question: str, schema: SchemaGraph, sl: Optional[SchemaLinkingResult] = None,
              value_links: Iterable[LinkEdge] = ()) -> QuestionSchemaStructure:
    links: list[LinkEdge] = []
    full = schema
    if sl is not None:
        for t in sl.tables:
            _resolve_name(schema, t)
        for t, c in sl.columns:
            _resolve_name(schema, f"{t}.{c}")
        pruned = prune_schema(schema, sl.tables, sl.columns)
        if sl.assignments:
            for span, targets in sl.assignments:
                start = question.casefold().find(span.casefold())
                s, e = (start, start + len(span)) if start >= 0 else (-1, -1)
                for target in targets:
                    node = _resolve_name(pruned, target)
                    kind = "q_to_table" if node.startswith("table:") else "q_to_column"
                    links.append(LinkEdge(kind, span, s, e, node))
        else:
            links.extend(name_match_links(question, pruned))
        schema = pruned
    else:
        links.extend(name_match_links(question, schema))
    nodes = schema.node_ids
    links.extend(v for v in value_links if v.target in nodes)
    links = list(dict.fromkeys(links))
    links.sort(key=lambda e: (e.start, e.end, e.kind, e.target))
    qnodes = tuple(dict.fromkeys((e.span, e.start, e.end) for e in links))
    return QuestionSchemaStructure(question, qnodes, schema, tuple(links), full)


def _fmt_value(v) -> str:
    if isinstance(v, str):
        short = v if len(v) <= 60 else v[:57] + "..."
        return repr(short)
    return repr(v)


def serialize_mschema(qss: QuestionSchemaStructure) -> str:
    """Deterministic m-schema style text block."""
    schema = qss.schema
    lines = [f"【DB_ID】 {schema.db_id}", "【Schema】"]
    for t in schema.tables:
        lines.append(f"# Table: {t.name}" + (f" -- {t.description}" if t.description else ""))
        lines.append("[")
        cols = schema.columns_of(t.name)
        for i, c in enumerate(cols):
            parts = [f"{c.qualified}: {c.type or 'ANY'}"]
            if c.primary_key:
                parts.append("Primary Key")
            if c.description:
                parts.append(c.description)
            if c.examples:
                parts.append("Examples: [" + ", ".join(_fmt_value(v) for v in c.examples) + "]")
            lines.append("(" + ", ".join(parts) + ")" + ("," if i < len(cols) - 1 else ""))
        lines.append("]")
    fks = schema.foreign_keys()
    if fks:
        lines.append("【Foreign keys】")
        lines.extend(f"{a.qualified}={b.qualified}" for a, b in fks)
    if qss.link_edges:
        lines.append("【Links】")
        for e in qss.link_edges:
            target = e.target.split(":", 1)[1]
            extra = f" (value {_fmt_value(e.value)})" if e.value is not None else ""
            lines.append(f"{e.span!r} -[{e.kind}]-> {target}{extra}")
    return "\n".join(lines)


def subgraph(qss: QuestionSchemaStructure, elements: Iterable[str]) -> QuestionSchemaStructure:
    """Restrict a QSS to schema elements (``table`` or ``table.column``) plus PK/FK closure."""
    base = qss.resolution_schema
    tables, columns = [], []
    for name in elements:
        if "." in name:
            t, c = name.split(".", 1)
            if base.column(t, c) is not None:
                columns.append((t, c))
        elif base.table(name) is not None:
            tables.append(name)
    pruned = prune_schema(base, tables, columns)
    nodes = pruned.node_ids
    links = tuple(e for e in qss.link_edges if e.target in nodes)
    qnodes = tuple(dict.fromkeys((e.span, e.start, e.end) for e in links))
    return replace(qss, schema=pruned, link_edges=links, question_nodes=qnodes,
                   full_schema=qss.resolution_schema)


# --------------------------------------------------------------------------
# Resolving AST references against a schema


def from_items(ast: SqlAst, query_id: int) -> list[tuple[int, str, str]]:
    """(table_ref node id, binding name, table name) for one query's FROM clause."""
    out = []
    for child in ast.children(query_id):
        if child.kind != "from_item":
            continue
        for item in ast.children(child.id):
            ref = ast.children(item.id)[0] if item.kind == "join" else item
            if ref.kind == "table_ref":
                alias = ref.attrs.get("alias")
                binding = unquote_identifier(alias)[0] if alias else ref.attrs["name"]
                out.append((ref.id, binding, ref.attrs["name"]))
    return out


def resolve_column(ast: SqlAst, node_id: int, schema: SchemaGraph) -> Optional[Column]:
    """The schema column a column_ref denotes, or None if unknown or ambiguous."""
    node = ast.node(node_id)
    name = node.attrs["name"]
    qual = node.attrs.get("table")
    if qual:
        table = resolve_qualifier(ast, node_id, qual)
        return schema.column(table, name) if table else None
    q = enclosing_query(ast, node_id)
    while q is not None:
        hits = {t.casefold(): schema.column(t, name) for _, _, t in from_items(ast, q)
                if schema.column(t, name) is not None}
        if len(hits) == 1:
            return next(iter(hits.values()))
        if len(hits) > 1:
            return None
        q = enclosing_query(ast, q)
    return None


ASSERTABLE_OPS = ("=", "==", "IN")


def literal_column(ast: SqlAst, literal_id: int, schema: SchemaGraph,
                   ops: tuple[str, ...] = ASSERTABLE_OPS) -> Optional[Column]:
    """The column a literal is compared against with one of ``ops``, if resolvable."""
    parent = ast.parent(literal_id)
    if parent is not None and parent.kind == "expr_list":
        parent = ast.parent(parent.id)
    if parent is None or parent.kind != "comparison" or parent.attrs["op"].upper() not in ops:
        return None
    col = next((c for c in ast.children(parent.id) if c.kind == "column_ref"), None)
    if col is None:
        return None
    return resolve_column(ast, col.id, schema)
