"""Static rule predicates shared by detection and error injection."""

from __future__ import annotations

from typing import Optional

from .execution import Database, value_in_domain
from .schema import SchemaGraph, from_items, literal_column
from .sqlast import SqlAst, unquote_identifier


def _nearest_query(ast: SqlAst, node_id: int) -> Optional[int]:
    for a in ast.ancestors(node_id):
        if a.kind == "query":
            return a.id
    return None


def _bound_table(ast: SqlAst, node_id: int, qualifier: str) -> Optional[str]:
    q = _nearest_query(ast, node_id)
    while q is not None:
        for _, binding, table in from_items(ast, q):
            if binding.casefold() == qualifier.casefold() or table.casefold() == qualifier.casefold():
                return table
        if _has_derived_items(ast, q):
            return None
        q = _nearest_query(ast, q)
    return None


def _has_derived_items(ast: SqlAst, query_id: int) -> bool:
    for c in ast.children(query_id):
        if c.kind == "from_item":
            for item in ast.children(c.id):
                ref = ast.children(item.id)[0] if item.kind == "join" else item
                if ref.kind != "table_ref":
                    return True
    return False


def _visible_tables(ast: SqlAst, query_id: int) -> Optional[list[str]]:
    """Tables visible to unqualified names in a query; None if a derived table hides names."""
    tables = []
    q = query_id
    while q is not None:
        if _has_derived_items(ast, q):
            return None
        tables += [t for _, _, t in from_items(ast, q)]
        q = _nearest_query(ast, q)
    return tables


def _in_join_using(ast: SqlAst, node_id: int) -> bool:
    parent = ast.parent(node_id)
    return parent is not None and parent.kind == "join" and parent.attrs.get("constraint") == "USING"


def _signed_literal(ast: SqlAst, lit) -> tuple[int, str]:
    """Node id and value of a literal, folding a leading unary minus on numbers."""
    parent = ast.parent(lit.id)
    if (lit.attrs["type"] == "number" and parent is not None and parent.kind == "unary_op"
            and parent.attrs.get("op") == "-"):
        value = lit.attrs["value"]
        return parent.id, value[1:] if value.startswith("-") else "-" + value
    return lit.id, lit.attrs["value"]


def value_error_rule(ast: SqlAst, schema: SchemaGraph, db: Database) -> bool:
    """A literal compared by equality against a column whose stored values exclude it."""
    for lit in ast.nodes:
        if lit.kind != "literal" or lit.attrs.get("type") not in ("string", "number"):
            continue
        node_id, value = _signed_literal(ast, lit)
        col = literal_column(ast, node_id, schema)
        if col is None:
            continue
        try:
            domain = db.lookup_values(col.table, col.name)
        except Exception:  # unreadable lookups are simply non-assertable
            continue
        if domain.truncated:
            continue
        if not value_in_domain(value, lit.attrs["type"], domain):
            return True
    return False


def table_redundancy_rule(ast: SqlAst, schema: SchemaGraph) -> bool:
    """A FROM item joined without a constraint that nothing in its query refers to."""
    for q in (n for n in ast.nodes if n.kind == "query"):
        frm = next((c for c in ast.children(q.id) if c.kind == "from_item"), None)
        if frm is None:
            continue
        items = ast.children(frm.id)
        if len(items) < 2:
            continue
        sel = next(c for c in ast.children(q.id) if c.kind == "select_clause")
        if any(c.kind == "star" and "table" not in c.attrs for c in ast.children(sel.id)):
            continue
        for item in items:
            if item.kind == "join" and item.attrs.get("constraint"):
                continue
            ref = ast.children(item.id)[0] if item.kind == "join" else item
            if ref.kind != "table_ref":
                continue
            alias = ref.attrs.get("alias")
            binding = unquote_identifier(alias)[0] if alias else ref.attrs["name"]
            own = {n.id for n in ast.walk(ref.id)}
            if not _mentions(ast, q.id, own, binding, ref.attrs["name"], schema):
                return True
    return False


def _mentions(ast: SqlAst, query_id: int, skip: set, binding: str, table: str,
              schema: SchemaGraph) -> bool:
    """Conservative: any name that could denote the item counts as a reference."""
    known = schema.table(table) is not None
    for n in ast.walk(query_id):
        if n.id in skip:
            continue
        if n.kind == "star":
            # COUNT(*) and friends do not name a table; bare SELECT * is handled by the caller
            if n.attrs.get("table", "").casefold() == binding.casefold():
                return True
        elif n.kind == "column_ref":
            qual = n.attrs.get("table")
            if qual is not None:
                if qual.casefold() == binding.casefold():
                    return True
            elif not known or schema.column(table, n.attrs["name"]) is not None:
                if not _bound_inside(ast, n.id, query_id, n.attrs["name"], schema):
                    return True
    return False


def _bound_inside(ast: SqlAst, node_id: int, outer_id: int, name: str,
                  schema: SchemaGraph) -> bool:
    """True if an unqualified name is captured by a query nested below ``outer_id``."""
    q = _nearest_query(ast, node_id)
    while q is not None and q != outer_id:
        if _has_derived_items(ast, q):
            return False  # hidden names: stay conservative
        if any(schema.column(t, name) is not None for _, _, t in from_items(ast, q)):
            return True
        q = _nearest_query(ast, q)
    return False


# rule predicate per error type with a static rule
STATIC_RULES = {
    "value_error": lambda ast, schema, db: value_error_rule(ast, schema, db),
    "table_redundancy": lambda ast, schema, db: table_redundancy_rule(ast, schema),
}
