"""Rule-based error injection: one AST operator per error type, plus composition.

Every operator enumerates the applicable sites of a gold AST, visits them in a
seeded random order, and keeps the first edit whose flattened SQL executes and
returns a result different from the gold query's.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .execution import (Database, ExecOutcome, exec_equivalent, execute, order_matters,
                        value_in_domain)
from .rules import STATIC_RULES
from .schema import SchemaGraph, from_items, literal_column, resolve_column
from .sqlast import ParseError, SqlAst, TreeNode, parse_sql, render, unquote_identifier
from .taxonomy import load_taxonomy

# pairs that would edit the same node class in conflicting ways
INCOMPATIBLE_PAIRS = frozenset({
    frozenset({"attribute_redundancy", "attribute_missing"}),
    frozenset({"table_redundancy", "table_missing"}),
    frozenset({"condition_missing", "condition_error"}),
})

NEAR_SYNONYMS = {
    "completed": ["Complete", "Finished", "Done"],
    "active": ["Ongoing", "Enrolled"],
    "withdrawn": ["Dropped", "Withdraw"],
    "shipped": ["Sent", "Dispatched"],
    "cancelled": ["Canceled"],
    "delivered": ["Received"],
    "pending": ["Waiting"],
    "premium": ["Gold"],
    "basic": ["Standard"],
    "usa": ["United States", "US"],
}

COMPARISON_FLIPS = {
    "=": ["!="], "==": ["!="], "!=": ["="], "<>": ["="],
    "<": [">=", "<="], "<=": [">", "<"], ">": ["<=", ">="], ">=": ["<", ">"],
    "LIKE": ["NOT LIKE"], "NOT LIKE": ["LIKE"], "GLOB": ["NOT GLOB"], "NOT GLOB": ["GLOB"],
    "IN": ["NOT IN"], "NOT IN": ["IN"], "BETWEEN": ["NOT BETWEEN"], "NOT BETWEEN": ["BETWEEN"],
    "IS": ["IS NOT"], "IS NOT": ["IS"],
}

FUNCTION_SWAPS = {"MAX": ["MIN"], "MIN": ["MAX"], "SUM": ["AVG"], "AVG": ["SUM"],
                  "UPPER": ["LOWER"], "LOWER": ["UPPER"]}


class ExecutionError(RuntimeError):
    """The database could not be read while verifying a perturbation."""


class IncompatiblePair(ValueError):
    def __init__(self, first: str, second: str):
        super().__init__(f"{first} and {second} cannot be composed")
        self.pair = (first, second)


@dataclass(frozen=True)
class Mutation:
    node_id: int
    before: str
    after: str
    label: str = ""


@dataclass(frozen=True)
class PerturbationOutcome:
    status: str  # applied, inapplicable
    perturbed_ast: Optional[SqlAst] = None
    injected_labels: frozenset = frozenset()
    mutation_log: tuple[Mutation, ...] = ()
    sql: Optional[str] = None
    reason: str = ""

    @property
    def applied(self) -> bool:
        return self.status == "applied"


def inapplicable(reason: str) -> PerturbationOutcome:
    return PerturbationOutcome("inapplicable", reason=reason)


# --------------------------------------------------------------------------
# Edits on a fresh mutable tree. Each edit returns its mutation log (or None
# when the tree turns out not to support it).

Edit = Callable[[TreeNode], Optional[list]]


@dataclass
class Site:
    key: str
    alternatives: list = field(default_factory=list)  # list of Edit
    ordered: bool = False  # alternatives already in preference order


def _find(tree: TreeNode, origin: int) -> TreeNode:
    node = tree.find_origin(origin)
    if node is None:
        raise KeyError(origin)
    return node


def _remove(tree: TreeNode, origin: int) -> str:
    node = _find(tree, origin)
    parent = tree.parent_of(node)
    parent.children = [c for c in parent.children if c is not node]
    return render(node)


def _set_attr(origin: int, label: str, **attrs: str) -> Edit:
    def edit(tree: TreeNode):
        node = _find(tree, origin)
        before = render(node)
        node.attrs.update(attrs)
        return [Mutation(origin, before, render(node), label)]
    return edit


# --------------------------------------------------------------------------
# Shared AST queries


def _bare_items(ast: SqlAst, select_id: int) -> list:
    return [c for c in ast.children(select_id) if c.kind != "modifier"]


def _child(ast: SqlAst, node_id: int, kind: str):
    return next((c for c in ast.children(node_id) if c.kind == kind), None)


def _subtree_ids(ast: SqlAst, node_id: int) -> set[int]:
    return {n.id for n in ast.walk(node_id)}


def _references_binding(ast: SqlAst, node_id: int, binding: str, table: str,
                        schema: SchemaGraph) -> bool:
    """Whether the subtree at ``node_id`` refers to the FROM item ``binding``."""
    for n in ast.walk(node_id):
        if n.kind == "column_ref":
            qual = n.attrs.get("table")
            if qual is not None:
                if qual.casefold() == binding.casefold():
                    return True
            else:
                col = resolve_column(ast, n.id, schema)
                if col is not None and col.table.casefold() == table.casefold():
                    return True
        elif n.kind == "star":
            qual = n.attrs.get("table")
            if qual is None or qual.casefold() == binding.casefold():
                return True
    return False


def _fresh_alias(ast: SqlAst) -> str:
    used = {n.attrs.get("alias", "").casefold() for n in ast.nodes} | {
        n.attrs.get("name", "").casefold() for n in ast.nodes if n.kind == "table_ref"}
    i = 1
    while f"x{i}" in used:
        i += 1
    return f"x{i}"


# --------------------------------------------------------------------------
# Value variants


def value_variants(value: str, literal_type: str) -> list[str]:
    """Candidate replacement values, in preference order."""
    out: list[str] = []
    if literal_type == "number":
        try:
            num = int(value)
            out += [str(num + 1), str(num - 1), str(num * 10)]
        except ValueError:
            num = float(value)
            out += [repr(num + 1), repr(num - 1), repr(num * 10)]
        return [v for v in dict.fromkeys(out) if v != value]
    if len(value) > 3:
        if value.endswith("ed"):
            out.append(value[:-1])
        out.append(value[:-1])
    else:
        out.append(value + "s")
    out += [value.lower(), value.upper(), value.title(), value.swapcase()]
    out += NEAR_SYNONYMS.get(value.casefold(), [])
    m = re.fullmatch(r"(\d{4})-(\d{2})-(\d{2})", value)
    if m:
        y, mo, d = m.groups()
        out += [f"{mo}/{d}/{y[2:]}", f"{y}/{mo}/{d}", f"{d}-{mo}-{y}"]
    if re.fullmatch(r"-?\d+", value):
        out.append(value + ".0")
    return [v for v in dict.fromkeys(out) if v and v != value]


# --------------------------------------------------------------------------
# Site enumeration per error type


class _Ctx:
    def __init__(self, ast: SqlAst, schema: SchemaGraph, db: Database):
        self.ast, self.schema, self.db = ast, schema, db

    @property
    def top_query(self):
        root = self.ast.node(self.ast.root)
        return root if root.kind == "query" else None


def _sites_attribute_mismatch(ctx: _Ctx) -> Iterator[Site]:
    ast = ctx.ast
    for sel in (n for n in ast.nodes if n.kind == "select_clause"):
        for item in _bare_items(ast, sel.id):
            targets = [item] if item.kind == "column_ref" else [
                c for c in ast.children(item.id) if c.kind == "column_ref"
            ] if item.kind == "function_call" else []
            for ref in targets:
                col = resolve_column(ast, ref.id, ctx.schema)
                if col is None:
                    continue
                alts = [_set_attr(ref.id, "attribute_mismatch", name=other.name, quote="")
                        for other in ctx.schema.columns_of(col.table)
                        if other.name.casefold() != col.name.casefold()]
                if alts:
                    yield Site(f"col#{ref.id}", alts)


def _sites_attribute_redundancy(ctx: _Ctx) -> Iterator[Site]:
    q = ctx.top_query
    if q is None:
        return
    ast = ctx.ast
    sel = _child(ast, q.id, "select_clause")
    items = from_items(ast, q.id)
    selected = set()
    for n in ast.walk(sel.id):
        if n.kind == "column_ref":
            col = resolve_column(ast, n.id, ctx.schema)
            if col is not None:
                selected.add((col.table.casefold(), col.name.casefold()))
    qualify = len(items) > 1
    for _ref_id, binding, table in items:
        alts = []
        for col in ctx.schema.columns_of(table):
            if (col.table.casefold(), col.name.casefold()) in selected:
                continue
            attrs = {"name": col.name}
            if qualify or binding.casefold() != table.casefold():
                attrs["table"] = binding

            def edit(tree, attrs=attrs):
                target = _find(tree, sel.id)
                new = TreeNode("column_ref", dict(attrs))
                target.children.append(new)
                return [Mutation(sel.id, "", render(new), "attribute_redundancy")]
            alts.append(edit)
        if alts:
            yield Site(f"table#{binding}", alts)


def _sites_attribute_missing(ctx: _Ctx) -> Iterator[Site]:
    q = ctx.top_query
    if q is None:
        return
    sel = _child(ctx.ast, q.id, "select_clause")
    items = _bare_items(ctx.ast, sel.id)
    if len(items) < 2:
        return
    for item in items:
        def edit(tree, origin=item.id):
            return [Mutation(origin, _remove(tree, origin), "", "attribute_missing")]
        yield Site(f"item#{item.id}", [edit])


def _sites_table_mismatch(ctx: _Ctx) -> Iterator[Site]:
    ast = ctx.ast
    for q in (n for n in ast.nodes if n.kind == "query"):
        for ref_id, binding, table in from_items(ast, q.id):
            needed = set()
            for n in ast.walk(q.id):
                if n.kind != "column_ref":
                    continue
                qual = n.attrs.get("table")
                if qual is not None and qual.casefold() == binding.casefold():
                    needed.add(n.attrs["name"].casefold())
                elif qual is None:
                    col = resolve_column(ast, n.id, ctx.schema)
                    if col is not None and col.table.casefold() == table.casefold():
                        needed.add(n.attrs["name"].casefold())
            alts = []
            for other in ctx.schema.tables:
                if other.name.casefold() == table.casefold():
                    continue
                names = {c.name.casefold() for c in ctx.schema.columns_of(other.name)}
                if needed <= names:
                    alts.append(_set_attr(ref_id, "table_mismatch", name=other.name, quote=""))
            if alts:
                yield Site(f"table#{ref_id}", alts)


def _sites_table_redundancy(ctx: _Ctx) -> Iterator[Site]:
    q = ctx.top_query
    if q is None:
        return
    ast = ctx.ast
    frm = _child(ast, q.id, "from_item")
    sel = _child(ast, q.id, "select_clause")
    if frm is None or any(c.kind == "star" and "table" not in c.attrs for c in ast.children(sel.id)):
        return
    alias = _fresh_alias(ast)
    alts = []
    for table in ctx.schema.tables:
        def edit(tree, name=table.name):
            target = _find(tree, frm.id)
            ref = TreeNode("table_ref", {"name": name, "alias": alias, "alias_as": "true"})
            join = TreeNode("join", {"join_type": "JOIN"}, [ref])
            target.children.append(join)
            return [Mutation(frm.id, "", render(join), "table_redundancy")]
        alts.append(edit)
    if alts:
        yield Site(f"from#{frm.id}", alts)


def _sites_table_missing(ctx: _Ctx) -> Iterator[Site]:
    q = ctx.top_query
    if q is None:
        return
    ast = ctx.ast
    frm = _child(ast, q.id, "from_item")
    if frm is None:
        return
    joins = ast.children(frm.id)[1:]
    for join in joins:
        ref = ast.children(join.id)[0]
        if ref.kind != "table_ref":
            continue
        alias = ref.attrs.get("alias")
        binding = unquote_identifier(alias)[0] if alias else ref.attrs["name"]
        table = ref.attrs["name"]
        if sum(1 for _, _, t in from_items(ast, q.id) if t.casefold() == table.casefold()) > 1 and not alias:
            continue

        def refers(nid, b=binding, t=table):
            return _references_binding(ast, nid, b, t, ctx.schema)

        removals = [join.id]
        sel = _child(ast, q.id, "select_clause")
        kept_items = []
        for item in _bare_items(ast, sel.id):
            (removals if refers(item.id) else kept_items).append(item.id)
        if not kept_items:
            continue
        where = _child(ast, q.id, "where_clause")
        if where is not None:
            cond = ast.children(where.id)[0]
            if cond.kind == "logical_op" and cond.attrs["op"] == "AND" and not cond.attrs.get("parens"):
                hits = [c.id for c in ast.children(cond.id) if refers(c.id)]
                if len(hits) == len(cond.children):
                    removals.append(where.id)
                else:
                    removals.extend(hits)
            elif refers(cond.id):
                removals.append(where.id)
        removed = set()
        for r in removals:
            removed |= _subtree_ids(ast, r)
        leftover = any(refers(c.id) for c in ast.children(q.id) if c.id not in removed
                       and c.kind != "from_item" and c.kind != "select_clause" and c.kind != "where_clause")
        leftover = leftover or any(refers(j.id) for j in joins if j.id not in removed)
        if leftover:
            continue

        def edit(tree, removals=tuple(removals)):
            return [Mutation(r, _remove(tree, r), "", "table_missing") for r in removals]
        yield Site(f"join#{join.id}", [edit])


def _sites_value_error(ctx: _Ctx) -> Iterator[Site]:
    ast = ctx.ast
    for lit in (n for n in ast.nodes if n.kind == "literal"):
        ltype = lit.attrs.get("type")
        if ltype not in ("string", "number"):
            continue
        col = literal_column(ast, lit.id, ctx.schema)
        if col is None:
            continue
        try:
            domain = ctx.db.lookup_values(col.table, col.name)
        except KeyError:
            continue
        if domain.truncated or not value_in_domain(lit.attrs["value"], ltype, domain):
            continue
        alts = [_set_attr(lit.id, "value_error", value=v)
                for v in value_variants(lit.attrs["value"], ltype)
                if not value_in_domain(v, ltype, domain)]
        if alts:
            yield Site(f"literal#{lit.id}", alts, ordered=True)


def _condition_roots(ast: SqlAst) -> list[int]:
    return [ast.children(n.id)[0].id for n in ast.nodes if n.kind in ("where_clause", "having")]


def _sites_condition_missing(ctx: _Ctx) -> Iterator[Site]:
    ast = ctx.ast
    for where in (n for n in ast.nodes if n.kind == "where_clause"):
        cond = ast.children(where.id)[0]
        if cond.kind == "logical_op" and cond.attrs["op"] == "AND" and not cond.attrs.get("parens"):
            for conj in ast.children(cond.id):
                def edit(tree, origin=conj.id):
                    return [Mutation(origin, _remove(tree, origin), "", "condition_missing")]
                yield Site(f"conjunct#{conj.id}", [edit])
        else:
            def edit(tree, origin=where.id):
                return [Mutation(origin, _remove(tree, origin), "", "condition_missing")]
            yield Site(f"where#{where.id}", [edit])


def _sites_condition_error(ctx: _Ctx) -> Iterator[Site]:
    ast = ctx.ast
    for root in _condition_roots(ast):
        for n in ast.walk(root):
            if n.kind == "subquery":
                continue
            if n.kind == "comparison":
                flips = COMPARISON_FLIPS.get(n.attrs["op"].upper(), [])
                alts = [_set_attr(n.id, "condition_error", op=f) for f in flips]
                if alts:
                    yield Site(f"cmp#{n.id}", alts, ordered=True)
            elif n.kind == "logical_op" and n.attrs["op"] in ("AND", "OR"):
                other = "OR" if n.attrs["op"] == "AND" else "AND"
                yield Site(f"logic#{n.id}", [_set_attr(n.id, "condition_error", op=other)])


def _sites_function_error(ctx: _Ctx) -> Iterator[Site]:
    for n in ctx.ast.nodes:
        if n.kind == "function_call" and n.attrs["name"] in FUNCTION_SWAPS:
            alts = [_set_attr(n.id, "function_error", name=s) for s in FUNCTION_SWAPS[n.attrs["name"]]]
            yield Site(f"fn#{n.id}", alts)


def _sites_clause_error(ctx: _Ctx) -> Iterator[Site]:
    ast = ctx.ast
    for q in (n for n in ast.nodes if n.kind in ("query", "compound")):
        kinds = {c.kind for c in ast.children(q.id)}
        for c in ast.children(q.id):
            if c.kind in ("group_by", "having") or (c.kind == "order_by" and "limit" in kinds):
                def edit(tree, origin=c.id):
                    return [Mutation(origin, _remove(tree, origin), "", "clause_error")]
                yield Site(f"clause#{c.id}", [edit])


def _sites_modifier_error(ctx: _Ctx) -> Iterator[Site]:
    ast = ctx.ast
    for n in ast.nodes:
        if n.kind == "order_by":
            kids = ast.children(n.id)
            for i, k in enumerate(kids):
                if k.kind == "modifier":
                    flip = "ASC" if k.attrs["value"] == "DESC" else "DESC"
                    yield Site(f"dir#{k.id}", [_set_attr(k.id, "modifier_error", value=flip)])
                elif i + 1 >= len(kids) or kids[i + 1].kind != "modifier":
                    def edit(tree, origin=k.id, parent=n.id):
                        target = _find(tree, parent)
                        node = _find(tree, origin)
                        idx = next(j for j, c in enumerate(target.children) if c is node)
                        target.children.insert(idx + 1, TreeNode("modifier", {"value": "DESC"}))
                        return [Mutation(origin, render(node), render(node) + " DESC", "modifier_error")]
                    yield Site(f"dir#{k.id}", [edit])
        elif n.kind in ("select_clause", "function_call"):
            kids = ast.children(n.id)
            if kids and kids[0].kind == "modifier" and kids[0].attrs["value"] == "DISTINCT":
                def edit(tree, origin=kids[0].id):
                    return [Mutation(origin, _remove(tree, origin), "", "modifier_error")]
                yield Site(f"distinct#{n.id}", [edit])
            elif n.kind == "select_clause" and not (kids and kids[0].kind == "modifier"):
                def edit(tree, origin=n.id):
                    target = _find(tree, origin)
                    target.children.insert(0, TreeNode("modifier", {"value": "DISTINCT"}))
                    return [Mutation(origin, "", "DISTINCT", "modifier_error")]
                yield Site(f"distinct#{n.id}", [edit])


SITE_FINDERS = {
    "attribute_mismatch": _sites_attribute_mismatch,
    "attribute_redundancy": _sites_attribute_redundancy,
    "attribute_missing": _sites_attribute_missing,
    "table_mismatch": _sites_table_mismatch,
    "table_redundancy": _sites_table_redundancy,
    "table_missing": _sites_table_missing,
    "value_error": _sites_value_error,
    "condition_missing": _sites_condition_missing,
    "condition_error": _sites_condition_error,
    "function_error": _sites_function_error,
    "clause_error": _sites_clause_error,
    "modifier_error": _sites_modifier_error,
}


# --------------------------------------------------------------------------
# Driver


_IO_MARKERS = ("unable to open", "disk i/o", "not a database", "readonly database")


def _baseline(sql: str, db: Database) -> ExecOutcome:
    outcome = execute(sql, db)
    if outcome.status == "error" and any(m in outcome.error_message.lower() for m in _IO_MARKERS):
        raise ExecutionError(outcome.error_message)
    return outcome


def _iter_applied(ast: SqlAst, schema: SchemaGraph, db: Database, label: str,
                  rng: random.Random, reference: ExecOutcome,
                  order_sensitive: bool) -> Iterator[PerturbationOutcome]:
    """Verified perturbations of ``ast`` in seeded random site order."""
    sites = list(SITE_FINDERS[label](_Ctx(ast, schema, db)))
    rng.shuffle(sites)
    previous = execute(render(ast.to_tree()), db)
    for site in sites:
        alternatives = list(site.alternatives)
        if not site.ordered:
            rng.shuffle(alternatives)
        for edit in alternatives:
            tree = ast.to_tree()
            try:
                log = edit(tree)
            except KeyError:
                continue
            if not log:
                continue
            sql = render(tree)
            try:
                new_ast = parse_sql(sql)
            except ParseError:
                continue
            outcome = execute(sql, db)
            if not outcome.ok:
                continue
            if exec_equivalent(previous, outcome, order_sensitive):
                continue
            if exec_equivalent(reference, outcome, order_sensitive):
                continue
            rule = STATIC_RULES.get(label)
            if rule is not None and not rule(new_ast, schema, db):
                continue  # keep injected errors of rule-checked types detectable
            yield PerturbationOutcome("applied", new_ast, frozenset({label}), tuple(log), sql)
            break


def perturb(ast: SqlAst, schema: SchemaGraph, db: Database, label, seed: int) -> PerturbationOutcome:
    """Inject one error of type ``label`` into a gold AST, verified by execution."""
    name = load_taxonomy().get(label).name
    gold_sql = render(ast.to_tree())
    reference = _baseline(gold_sql, db)
    if not reference.ok:
        return inapplicable("gold query does not execute")
    rng = random.Random(seed)
    for outcome in _iter_applied(ast, schema, db, name, rng, reference, order_matters(gold_sql)):
        return outcome
    return inapplicable(f"no applicable site for {name}")


def is_compatible(first: str, second: str) -> bool:
    return frozenset({first, second}) not in INCOMPATIBLE_PAIRS


def compose(ast: SqlAst, schema: SchemaGraph, db: Database, labels, seed: int) -> PerturbationOutcome:
    """Apply two operators in order; both edits are verified on the final SQL."""
    tax = load_taxonomy()
    first, second = (tax.get(l).name for l in labels)
    if first == second:
        raise ValueError("composed labels must be distinct")
    if not is_compatible(first, second):
        raise IncompatiblePair(first, second)
    gold_sql = render(ast.to_tree())
    reference = _baseline(gold_sql, db)
    if not reference.ok:
        return inapplicable("gold query does not execute")
    order_sensitive = order_matters(gold_sql)
    rng = random.Random(seed)
    for step in _iter_applied(ast, schema, db, first, rng, reference, order_sensitive):
        inner = random.Random(rng.random())
        for final in _iter_applied(step.perturbed_ast, schema, db, second, inner, reference,
                                   order_sensitive):
            return PerturbationOutcome("applied", final.perturbed_ast, frozenset({first, second}),
                                       step.mutation_log + final.mutation_log, final.sql)
    return inapplicable(f"no joint site for {first} and {second}")


def verify_difference(sql: str, gold_sql: str, db: Database) -> bool:
    """Independent check that ``sql`` runs and differs from the gold result."""
    gold = execute(gold_sql, db)
    new = execute(sql, db)
    return gold.ok and not exec_equivalent(gold, new, order_matters(gold_sql))
