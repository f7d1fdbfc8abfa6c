import pytest

from sqlrefine.backends import BackendError, MockBackend, fixed_responder, make_oracle
from sqlrefine.detection import build_detection_input
from sqlrefine.execution import exec_equivalent, execute, order_matters
from sqlrefine.prompts import (extract_sql, format_localization_block, parse_localization_blocks,
                               parse_sections)
from sqlrefine.records import sample_from_row
from sqlrefine.refinement import (ExampleStore, MalformedLocalization, RefinementFailed,
                                  extract_context, localize, order_context, refine,
                                  resolve_span, run_pipeline)
from sqlrefine.schema import build_qss
from sqlrefine.sqlast import parse_sql
from sqlrefine.taxonomy import NO_ERROR, load_taxonomy


def det_input(row, qss):
    sample = sample_from_row(row)
    return build_detection_input(sample, qss, parse_sql(sample.sql), None)


def value_block(nodes="'Complete'", **extra):
    values = {"nodes": nodes, "clause": "WHERE", "current_value": "Complete",
              "correct_value_from_nl": "Completed", "data_type": "text",
              "format_issue": "spelling"}
    values.update(extra)
    return format_localization_block("value_error", values)


# --------------------------------------------------------------------------
# transport format


def test_localization_block_roundtrip():
    text = value_block() + "\n\n" + format_localization_block("clause_error", {"nodes": "none"})
    blocks = parse_localization_blocks("preamble\n" + text + "\ntrailing words")
    assert [b[0] for b in blocks] == ["value_error", "clause_error"]
    assert blocks[0][1]["correct_value_from_nl"] == "Completed"


def test_extract_sql_variants():
    assert extract_sql("```sql\nSELECT 1\n```") == "SELECT 1"
    assert extract_sql("Here you go:\n```\nSELECT 2;\n```\nbye").rstrip(";") == "SELECT 2"
    assert extract_sql("SELECT 3") == "SELECT 3"


# --------------------------------------------------------------------------
# localization


def test_resolve_span_exact_and_fallback():
    ast = parse_sql("SELECT s.name FROM student s WHERE s.status = 'Complete'")
    lit = resolve_span(ast, "'Complete'")
    assert [ast.node(i).kind for i in lit] == ["literal"]
    cond = resolve_span(ast, "s.status = 'Complete'")
    assert [ast.node(i).kind for i in cond] == ["comparison"]
    assert resolve_span(ast, "nowhere to be found") == []
    assert resolve_span(ast, "") == []


def test_localize_value_error(running, running_qss):
    backend = fixed_responder(value_block())
    locs = localize(det_input(running, running_qss), {"value_error"}, backend,
                    parse_sql(running["predicted_sql"]), running_qss.resolution_schema)
    assert len(locs) == 1
    loc = locs[0]
    ast = parse_sql(running["predicted_sql"])
    assert [ast.node(i).kind for i in loc.error_nodes] == ["literal"]
    assert "enrollment.status" in loc.schema_elements
    assert loc.filled_guideline["correct_value_from_nl"] == "Completed"
    assert loc.warnings == ()
    assert "Completed" in loc.guideline_text()


def test_localize_retries_until_every_label_has_a_block(running, running_qss):
    answers = [value_block(), value_block() + "\n" + format_localization_block(
        "condition_error", {"nodes": "e.status = 'Complete'"})]

    def respond(system, user, allowed):
        return answers.pop(0)

    backend = MockBackend("fixed_responder", respond)
    locs = localize(det_input(running, running_qss), {"value_error", "condition_error"}, backend,
                    parse_sql(running["predicted_sql"]), running_qss.resolution_schema)
    assert [l.error_type.name for l in locs] == ["value_error", "condition_error"]
    assert backend.call_count == 2


def test_localize_gives_up(running, running_qss):
    backend = fixed_responder("I could not find anything")
    with pytest.raises(MalformedLocalization):
        localize(det_input(running, running_qss), {"value_error"}, backend,
                 parse_sql(running["predicted_sql"]), running_qss.resolution_schema, retries=1)
    assert backend.call_count == 2
    with pytest.raises(BackendError):
        localize(det_input(running, running_qss), {"value_error"}, None, None,
                 running_qss.resolution_schema)


def test_unresolvable_span_downgrades_to_clause(running, running_qss):
    backend = fixed_responder(value_block(nodes="'Finished'", format_issue=""))
    ast = parse_sql(running["predicted_sql"])
    loc = localize(det_input(running, running_qss), {"value_error"}, backend, ast,
                   running_qss.resolution_schema)[0]
    assert [ast.node(i).kind for i in loc.error_nodes] == ["where_clause"]
    assert any("could not resolve" in w for w in loc.warnings)
    assert loc.filled_guideline["format_issue"] == "unknown"
    assert any("format_issue" in w for w in loc.warnings)


# --------------------------------------------------------------------------
# context and refinement


def test_example_store():
    store = ExampleStore.default()
    for t in load_taxonomy():
        demos = store.retrieve(t, k=2)
        assert len(demos) == 2
        assert all(d.error_type == t.name for d in demos)
    assert store.retrieve("value_error", k=0) == []
    assert len(store) == 36


def test_example_store_demos_are_real_fixes(pool):
    for d in ExampleStore.default().all():
        db = pool.get(d.db_id)
        gold = execute(d.fixed_sql, db)
        wrong = execute(d.wrong_sql, db)
        assert gold.ok
        assert not exec_equivalent(gold, wrong, order_matters(d.fixed_sql)), d.wrong_sql


def test_context_subtree_scope(running, running_qss):
    ast = parse_sql(running["predicted_sql"])
    di = det_input(running, running_qss)
    store = ExampleStore.default()
    val = localize(di, {"value_error"}, fixed_responder(value_block()), ast,
                   running_qss.resolution_schema)[0]
    entry = extract_context(ast, running_qss, val, store)
    assert entry.subtree.kind == "where_clause"
    assert [t.name for t in entry.subgraph.schema.tables] == ["enrollment"]
    assert len(entry.examples) == 2
    missing = localize(di, {"table_missing"},
                       fixed_responder(format_localization_block("table_missing",
                                                                 {"nodes": "e.status"})),
                       ast, running_qss.resolution_schema)[0]
    wide = extract_context(ast, running_qss, missing, store)
    assert wide.subtree.kind == "query"  # absence errors see the whole query


def test_refine_checks_priority_and_parses(running, running_qss):
    ast = parse_sql(running["predicted_sql"])
    di = det_input(running, running_qss)
    store = ExampleStore.default()
    blocks = value_block() + "\n" + format_localization_block("table_missing", {"nodes": "none"})
    locs = localize(di, {"value_error", "table_missing"}, fixed_responder(blocks), ast,
                    running_qss.resolution_schema)
    ctx = [extract_context(ast, running_qss, l, store) for l in locs]
    ordered = order_context(reversed(ctx))
    assert [e.error_type.name for e in ordered] == ["table_missing", "value_error"]
    with pytest.raises(ValueError):
        refine(running["predicted_sql"], ordered[::-1], fixed_responder("SELECT 1"))
    assert refine(running["predicted_sql"], ordered, fixed_responder("```sql\nSELECT 1\n```")) == "SELECT 1"
    bad = fixed_responder("not sql at all")
    with pytest.raises(RefinementFailed):
        refine(running["predicted_sql"], ordered, bad, retries=2)
    assert bad.call_count == 3


def test_refinement_prompt_lists_errors_in_order(running, running_qss):
    seen = []

    def respond(system, user, allowed):
        seen.append(user)
        return running["gold_sql"]

    ast = parse_sql(running["predicted_sql"])
    store = ExampleStore.default()
    locs = localize(det_input(running, running_qss), {"value_error"},
                    fixed_responder(value_block()), ast, running_qss.resolution_schema)
    refine(running["predicted_sql"], [extract_context(ast, running_qss, locs[0], store)],
           MockBackend("fixed_responder", respond), running["question"])
    sections = parse_sections(seen[0])
    assert sections["SQL"] == running["predicted_sql"]
    assert "Error 1: Value Error" in sections
    assert "Fragment: WHERE e.status = 'Complete'" in sections["Error 1: Value Error"]


# --------------------------------------------------------------------------
# pipeline


def test_pipeline_with_oracles_fixes_the_running_example(running, running_qss, school):
    det, loc, ref = make_oracle([running])
    res = run_pipeline(sample_from_row(running), school, running_qss, det, loc, ref)
    assert res.status == "refined"
    assert res.final_labels == ["value_error"]
    assert "'Completed'" in res.refined
    assert exec_equivalent(execute(res.refined, school), execute(running["gold_sql"], school))
    rec = res.record()
    assert rec["localizations"][0]["guideline"]["correct_value_from_nl"] == "Completed"


def test_pipeline_passthrough_never_calls_later_stages(rows, school, school_schema):
    row = rows[1]
    det, loc, ref = make_oracle([row])
    qss = build_qss(row["question"], school_schema)
    res = run_pipeline(sample_from_row(row), school, qss, det, loc, ref)
    assert res.status == "passthrough"
    assert res.refined == row["gold_sql"]
    assert res.final_labels == [NO_ERROR]
    assert loc.call_count == 0 and ref.call_count == 0


def test_pipeline_records_failures(running, running_qss, school):
    det, loc, _ = make_oracle([running])
    res = run_pipeline(sample_from_row(running), school, running_qss, det, loc,
                       fixed_responder("no sql here"))
    assert res.status == "refinement_failed"
    assert res.refined == running["predicted_sql"]
    assert res.errors
    res = run_pipeline(sample_from_row(running), school, running_qss, det, None, None)
    assert res.status == "refinement_failed"
    assert any("localization" in e for e in res.errors)


def test_pipeline_falls_back_to_rules_when_detector_breaks(running, running_qss, school):
    def respond(system, user, allowed):
        raise BackendError("down")

    _, loc, ref = make_oracle([running])
    res = run_pipeline(sample_from_row(running), school, running_qss,
                       MockBackend("failing", respond), loc, ref)
    assert res.final_labels == ["value_error"]
    assert res.status == "refined"
    assert any(e.startswith("detection") for e in res.errors)
