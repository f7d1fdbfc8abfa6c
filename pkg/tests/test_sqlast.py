import random
from pathlib import Path

import pytest

from sqlrefine.demo import corpus_rows
from sqlrefine.sqlast import (ParseError, UnknownNode, UnsupportedDialect, collect_schema_references,
                              flatten_ast, minimal_enclosing_subtree, parse_sql, resolve_qualifier,
                              tokenize, unquote_identifier)

DATA = Path(__file__).parent / "data"


def roundtrip_corpus() -> list[str]:
    queries = []
    for line in (DATA / "roundtrip.sql").read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("--"):
            queries.append(line)
    for row in corpus_rows():
        queries.append(row["gold_sql"])
        queries.append(row["predicted_sql"])
    return list(dict.fromkeys(queries))


# --------------------------------------------------------------------------
# random query generator

TABLES = {"student": ["id", "name", "age"], "enrollment": ["id", "student_id", "status", "score"],
          "course": ["id", "title", "credits"]}
AGGS = ["COUNT", "MAX", "MIN", "SUM", "AVG"]


class QueryGen:
    def __init__(self, seed: int):
        self.rng = random.Random(seed)

    def literal(self) -> str:
        r = self.rng.random()
        if r < 0.4:
            return str(self.rng.randint(0, 99))
        if r < 0.5:
            return f"{self.rng.randint(0, 9)}.{self.rng.randint(0, 9)}"
        if r < 0.9:
            return "'" + self.rng.choice(["Active", "Bob", "it''s", "", "A%"]) + "'"
        return "NULL"

    def column(self, scope) -> str:
        alias, table = self.rng.choice(scope)
        col = self.rng.choice(TABLES[table])
        return f"{alias}.{col}" if self.rng.random() < 0.7 else col

    def expr(self, scope, depth=0) -> str:
        r = self.rng.random()
        if depth > 2 or r < 0.4:
            return self.column(scope)
        if r < 0.55:
            return self.literal()
        if r < 0.7:
            op = self.rng.choice(["+", "-", "*", "/", "||"])
            return f"{self.expr(scope, depth + 1)} {op} {self.expr(scope, depth + 1)}"
        if r < 0.8:
            return f"({self.expr(scope, depth + 1)})"
        if r < 0.9:
            return f"{self.rng.choice(['LOWER', 'ABS', 'LENGTH'])}({self.column(scope)})"
        return f"CASE WHEN {self.cond(scope, depth + 1)} THEN {self.literal()} ELSE {self.literal()} END"

    def cond(self, scope, depth=0) -> str:
        r = self.rng.random()
        if depth < 2 and r < 0.25:
            op = self.rng.choice(["AND", "OR"])
            return f"{self.cond(scope, depth + 1)} {op} {self.cond(scope, depth + 1)}"
        if depth < 2 and r < 0.3:
            return f"NOT ({self.cond(scope, depth + 1)})"
        if r < 0.4:
            return f"{self.column(scope)} IN ({self.literal()}, {self.literal()})"
        if r < 0.45:
            return f"{self.column(scope)} BETWEEN {self.literal()} AND {self.literal()}"
        if r < 0.5:
            return f"{self.column(scope)} IS {'NOT ' if self.rng.random() < 0.5 else ''}NULL"
        if r < 0.55:
            return f"{self.column(scope)} LIKE 'A%'"
        if depth < 2 and r < 0.62:
            inner = self.query(depth + 1, single=True)
            return f"{self.column(scope)} {self.rng.choice(['IN', 'NOT IN'])} ({inner})"
        if depth < 2 and r < 0.66:
            return f"EXISTS ({self.query(depth + 1)})"
        op = self.rng.choice(["=", "<>", "!=", "<", ">", "<=", ">="])
        return f"{self.expr(scope, depth + 1)} {op} {self.expr(scope, depth + 1)}"

    def query(self, depth=0, single=False) -> str:
        names = self.rng.sample(sorted(TABLES), self.rng.randint(1, 2))
        scope = [(f"t{i}", t) for i, t in enumerate(names)]
        from_ = f"{names[0]} {'AS ' if self.rng.random() < 0.3 else ''}t0"
        if len(names) > 1:
            kind = self.rng.choice(["JOIN", "LEFT JOIN", "INNER JOIN"])
            from_ += f" {kind} {names[1]} t1 ON t0.id = t1.{self.rng.choice(TABLES[names[1]])}"
        grouped = self.rng.random() < 0.25
        if single:
            items = [self.column(scope)]
        elif grouped:
            key = self.column(scope)
            items = [key, f"{self.rng.choice(AGGS)}({self.column(scope)})"]
        else:
            items = [self.expr(scope) for _ in range(self.rng.randint(1, 3))]
            if self.rng.random() < 0.1:
                items = ["*"]
        distinct = "DISTINCT " if self.rng.random() < 0.2 else ""
        sql = f"SELECT {distinct}{', '.join(items)} FROM {from_}"
        if self.rng.random() < 0.6:
            sql += f" WHERE {self.cond(scope, depth)}"
        if grouped:
            sql += f" GROUP BY {items[0]}"
            if self.rng.random() < 0.5:
                sql += f" HAVING COUNT(*) > {self.rng.randint(0, 5)}"
        if not single and depth == 0 and self.rng.random() < 0.15:
            sql += f" UNION SELECT {', '.join(self.column(scope) for _ in items)} FROM {from_}"
        if depth == 0 and self.rng.random() < 0.4:
            sql += f" ORDER BY {self.rng.randint(1, len(items))} {self.rng.choice(['ASC', 'DESC', ''])}".rstrip()
        if self.rng.random() < 0.2:
            sql += f" LIMIT {self.rng.randint(1, 9)}"
        return sql


def generated_queries(n=1000, seed=7) -> list[str]:
    gen = QueryGen(seed)
    return [gen.query() for _ in range(n)]


# --------------------------------------------------------------------------


def test_corpus_is_large_and_varied():
    corpus = roundtrip_corpus()
    assert len(corpus) >= 200
    text = " ".join(corpus).upper()
    for feature in ("JOIN", "GROUP BY", "HAVING", "ORDER BY", "DISTINCT", "(SELECT", "COUNT("):
        assert feature in text


def test_roundtrip_structural_equality():
    corpus = roundtrip_corpus()
    failures = []
    for sql in corpus:
        ast = parse_sql(sql)
        again = parse_sql(flatten_ast(ast))
        if again.structure() != ast.structure():
            failures.append(sql)
    assert failures == []


def test_flatten_is_a_fixed_point():
    for sql in roundtrip_corpus():
        flat = flatten_ast(parse_sql(sql))
        assert flatten_ast(parse_sql(flat)) == flat


def check_alignment(ast):
    n = len(ast.source_tokens)
    root = ast.node(ast.root)
    assert root.span == (0, n - 1)
    for node in ast.walk():
        s, e = node.span
        assert 0 <= s <= e < n, (node.kind, node.span)
        for c in ast.children(node.id):
            assert s <= c.span[0] and c.span[1] <= e, "child span escapes parent"
            assert c.parent == node.id
        # siblings are disjoint (LIMIT a, b stores count before offset, so not always in order)
        spans = sorted(c.span for c in ast.children(node.id))
        for (_, e1), (s2, _) in zip(spans, spans[1:]):
            assert e1 < s2, "sibling spans overlap"
    # totality: every name or value token is inside a leaf, or is recorded as an
    # attribute (function name, alias, cast type) of the smallest node spanning it
    for i, tok in enumerate(ast.tokens):
        if tok.kind not in ("ident", "qident", "number", "string"):
            continue
        owner = min((n for n in ast.walk() if n.span[0] <= i <= n.span[1]),
                    key=lambda n: n.span[1] - n.span[0])
        if owner.children:
            bare = unquote_identifier(tok.text)[0].lower()
            assert bare in {str(v).lower() for v in owner.attrs.values()}, (i, tok, owner.kind)


def test_alignment_invariants_on_generated_queries():
    queries = generated_queries(1000)
    assert len(set(queries)) > 900
    for sql in queries:
        ast = parse_sql(sql)
        check_alignment(ast)
        assert parse_sql(flatten_ast(ast)).structure() == ast.structure()


def test_alignment_on_corpus():
    for sql in roundtrip_corpus():
        check_alignment(parse_sql(sql))


def test_text_of_node_uses_source_tokens():
    ast = parse_sql("SELECT name FROM student WHERE status = 'Completed'")
    lits = [n for n in ast.walk() if n.kind == "literal"]
    assert ast.text(lits[0].id) == "'Completed'"
    assert ast.text(ast.root) == "SELECT name FROM student WHERE status = 'Completed'"


def test_empty_string_literal_survives():
    ast = parse_sql("SELECT IFNULL(name, '') FROM student")
    assert "''" in flatten_ast(ast)


@pytest.mark.parametrize("bad", ["", "   ", "SELECT", "SELECT name FROM", "SELECT (a FROM t",
                                 "UPDATE t SET a = 1", "SELECT a FROM t WHERE"])
def test_parse_errors(bad):
    with pytest.raises(ParseError):
        parse_sql(bad)


def test_parse_error_reports_token_index():
    with pytest.raises(ParseError) as info:
        parse_sql("SELECT a FROM t t2 t3")
    assert info.value.position == 5


def test_unsupported_dialect():
    with pytest.raises(UnsupportedDialect):
        parse_sql("SELECT 1", dialect="oracle")


def test_unknown_node():
    ast = parse_sql("SELECT 1")
    with pytest.raises(UnknownNode):
        ast.node(999)


def test_tokenize_keeps_quoted_identifiers():
    toks = tokenize('SELECT "first name" FROM [my table]')
    assert [t.kind for t in toks][1] == "qident"
    assert toks[3].text == "[my table]"


def test_minimal_enclosing_subtree():
    ast = parse_sql("SELECT name FROM student WHERE id = 1 AND status = 'x'")
    lits = [n.id for n in ast.walk() if n.kind == "literal"]
    frag = minimal_enclosing_subtree(ast, lits)
    assert frag.kind == "where_clause"  # widened to the clause holding both
    assert set(lits) <= set(frag.node_ids)
    assert frag.targets == frozenset(lits)
    sel = next(n.id for n in ast.walk() if n.kind == "column_ref")
    assert minimal_enclosing_subtree(ast, [sel]).kind == "select_clause"
    assert minimal_enclosing_subtree(ast, []).is_empty


def test_schema_references_resolve_aliases():
    ast = parse_sql("SELECT s.name FROM student s JOIN enrollment e ON s.id = e.student_id")
    refs = collect_schema_references(ast)
    tables = {r.name for r in refs if r.kind == "table"}
    assert tables == {"student", "enrollment"}
    col = next(n for n in ast.walk() if n.kind == "column_ref")
    assert resolve_qualifier(ast, col.id, "s") == "student"
