import json

import pytest

from sqlrefine.schema import (SchemaLinkingResult, UnresolvedLinkTarget, build_qss, column_node,
                              fuzzy_ratio, introspect_schema, levenshtein, link_values,
                              literal_column, name_match_links, prune_schema, resolve_column,
                              serialize_mschema, subgraph, table_node)
from sqlrefine.sqlast import parse_sql


def test_introspect_tables_columns_keys(school_schema):
    assert [t.name for t in school_schema.tables] == ["enrollment", "student"]  # sorted by name
    assert [c.name for c in school_schema.columns_of("student")] == ["id", "name"]
    assert school_schema.column("student", "id").primary_key
    fks = school_schema.foreign_keys()
    assert [(a.qualified, b.qualified) for a, b in fks] == [("enrollment.student_id", "student.id")]
    kinds = {e.kind for e in school_schema.edges}
    assert kinds == {"has_column", "primary_key_of", "foreign_key_to"}


def test_foreign_key_edges_are_bidirectional(school_schema):
    fk = {(e.source, e.target) for e in school_schema.edges if e.kind == "foreign_key_to"}
    a, b = column_node("enrollment", "student_id"), column_node("student", "id")
    assert (a, b) in fk and (b, a) in fk


def test_examples_are_distinct_and_bounded(school_schema):
    ex = school_schema.column("enrollment", "status").examples
    assert 0 < len(ex) <= 3
    assert len(set(ex)) == len(ex)


def test_lookups_are_case_insensitive(school_schema):
    assert school_schema.table("STUDENT").name == "student"
    assert school_schema.column("Student", "NAME").name == "name"
    assert school_schema.tables_with_column("ID") == ["student"]


def test_introspect_missing_file(tmp_path):
    with pytest.raises(Exception):
        introspect_schema(tmp_path / "nope.sqlite")


def test_schema_json_roundtrip(school_schema):
    doc = school_schema.to_json()
    assert json.loads(json.dumps(doc)) == doc
    assert {c["name"] for c in doc["columns"]} >= {"id", "name", "status"}


def test_levenshtein_and_ratio():
    assert levenshtein("kitten", "sitting") == 3
    assert levenshtein("", "abc") == 3
    assert fuzzy_ratio("abc", "abc") == 1.0
    assert 0.85 <= fuzzy_ratio("completed", "complete") < 1.0


def test_value_linking_finds_near_misses(school, school_schema):
    links = link_values("Which students completed the course?", school_schema, school)
    hits = {(e.span.lower(), e.value) for e in links}
    assert ("completed", "Completed") in hits
    assert all(e.kind == "value_match" for e in links)
    with pytest.raises(ValueError):
        link_values("x", school_schema, school, threshold=1.5)


def test_name_links(school_schema):
    links = name_match_links("List the names of all students.", school_schema)
    targets = {e.target for e in links}
    assert table_node("student") in targets
    assert column_node("student", "name") in targets


def test_qss_with_external_linking_prunes(pool, rows):
    row = next(r for r in rows if r["db_id"] == "university")
    schema = introspect_schema(pool.get("university"))
    sl = SchemaLinkingResult(tables=("instructor",), columns=(("instructor", "salary"),))
    qss = build_qss(row["question"], schema, sl)
    assert [t.name for t in qss.schema.tables] == ["instructor"]
    kept = {c.name for c in qss.schema.columns}
    assert "salary" in kept and "id" in kept  # primary key survives pruning
    assert qss.resolution_schema is schema


def test_qss_rejects_unknown_link_target(school_schema):
    with pytest.raises(UnresolvedLinkTarget):
        build_qss("q", school_schema, SchemaLinkingResult(tables=("ghost",)))


def test_prune_keeps_join_columns(pool):
    schema = introspect_schema(pool.get("university"))
    pruned = prune_schema(schema, ["instructor", "department"], [])
    names = {c.qualified for c in pruned.columns}
    assert {"instructor.dept_id", "department.dept_id"} <= names
    assert all(e.source in pruned.node_ids and e.target in pruned.node_ids for e in pruned.edges)


def test_mschema_is_deterministic(running, school, school_schema):
    links = link_values(running["question"], school_schema, school)
    a = serialize_mschema(build_qss(running["question"], school_schema, value_links=links))
    b = serialize_mschema(build_qss(running["question"], school_schema, value_links=links))
    assert a == b
    assert "# Table: student" in a
    assert "enrollment.student_id=student.id" in a
    assert "'Completed'" in a


def test_subgraph_keeps_full_schema(running_qss):
    sub = subgraph(running_qss, ["enrollment.status"])
    assert [t.name for t in sub.schema.tables] == ["enrollment"]
    assert sub.resolution_schema.table("student") is not None


def test_resolve_column_and_literal(school_schema):
    ast = parse_sql("SELECT s.name FROM student s JOIN enrollment e ON s.id = e.student_id "
                    "WHERE e.status = 'Complete'")
    col = next(n for n in ast.walk() if n.kind == "column_ref" and n.attrs.get("name") == "status")
    assert resolve_column(ast, col.id, school_schema).qualified == "enrollment.status"
    lit = next(n for n in ast.walk() if n.kind == "literal")
    assert literal_column(ast, lit.id, school_schema).qualified == "enrollment.status"
