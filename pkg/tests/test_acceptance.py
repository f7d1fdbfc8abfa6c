"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (visible with ``pytest -s``) and
asserts its own runtime bound.
"""

import json
import time
from contextlib import contextmanager
from fractions import Fraction

import pytest
from hypothesis import given, settings

from sqlrefine.backends import make_assistant_oracle, make_oracle
from sqlrefine.cli import dump_config, main
from sqlrefine.detection import aggregate, static_detect
from sqlrefine.execution import exec_equivalent, execute
from sqlrefine.metrics import SampleRecord, compute_metrics, delta_ex
from sqlrefine.perturb import perturb
from sqlrefine.records import read_jsonl, sample_from_row, write_jsonl
from sqlrefine.refinement import run_pipeline
from sqlrefine.schema import build_qss
from sqlrefine.sqlast import flatten_ast, parse_sql
from sqlrefine.synth import SynthConfig, synthesize_dataset, verify_dataset
from sqlrefine.taxonomy import NO_ERROR, tokens_for

from test_detection import label_sets
from test_sqlast import check_alignment, generated_queries, roundtrip_corpus
import test_taxonomy as golden


RESULTS: list[str] = []  # echoed in the terminal summary by conftest


@contextmanager
def criterion(name, budget):
    start = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        took = time.perf_counter() - start
        ok = ok and took < budget
        line = f"{'PASS' if ok else 'FAIL'} {name} ({took:.2f}s, budget {budget}s)"
        RESULTS.append(line)
        print("\n" + line)
    assert took < budget, f"{name} took {took:.2f}s"


def rec(qid, before, flagged, after, changed):
    return SampleRecord(qid, before, flagged, after, changed, frozenset(), None)


def confusion_for(precision, recall, digits=4, limit=2000):
    """Smallest integer confusion whose rounded precision and recall hit the targets."""
    for tp in range(1, limit):
        fp = round(tp / precision) - tp
        fn = round(tp / recall) - tp
        if fp < 0 or fn < 0:
            continue
        if (round(tp / (tp + fp), digits) == precision
                and round(tp / (tp + fn), digits) == recall):
            return tp, fp, fn
    raise AssertionError("no confusion found")


def test_metric_arithmetic():
    with criterion("metric arithmetic", 1.0):
        tp, fp, fn = confusion_for(0.8012, 0.7622)
        records = ([rec(f"tp{i}", False, True, False, False) for i in range(tp)]
                   + [rec(f"fp{i}", True, True, True, False) for i in range(fp)]
                   + [rec(f"fn{i}", False, False, False, False) for i in range(fn)])
        report = compute_metrics(records)
        assert report.d_f1 == pytest.approx(0.7812, abs=1e-4)

        # solve the accuracy gain for the false-alarm cost
        tp2, fr, total, gain = 205, Fraction("0.7902"), 1534, Fraction("0.0234")
        cost = tp2 * fr - gain * total
        assert float(cost) == pytest.approx(126.1, abs=0.5)
        fp2 = 400
        cr = float(cost / fp2)
        assert delta_ex(tp2, fp2, float(fr), cr, total) == pytest.approx(0.0234, abs=1e-12)


def test_rule_inversion(rows, pool, schemas):
    with criterion("rule inversion", 60.0):
        assert len(rows) >= 50 and len({r["db_id"] for r in rows}) >= 3
        misses, hits = [], {"value_error": 0, "table_redundancy": 0}
        for r in rows:
            db, schema = pool.get(r["db_id"]), schemas[r["db_id"]]
            qss = build_qss(r["question"], schema)
            gold = parse_sql(r["gold_sql"])
            assert static_detect(gold, qss, db, execute(r["gold_sql"], db)) == frozenset()
            for label in hits:
                out = perturb(gold, schema, db, label, seed=0)
                if not out.applied:
                    continue
                found = static_detect(parse_sql(out.sql), qss, db, execute(out.sql, db))
                if label in found:
                    hits[label] += 1
                else:
                    misses.append((label, out.sql))
        assert misses == []
        assert all(n > 0 for n in hits.values())


def test_synthesis_reverifies(rows, pool):
    with criterion("synthesis re-verification and ratio", 120.0):
        samples, report = synthesize_dataset(rows, pool, SynthConfig(seed=0),
                                             make_assistant_oracle(rows))
        assert verify_dataset(samples, pool) == []
        correct = sum(1 for s in samples if not s.labels)
        assert abs(correct / len(samples) - 0.49) <= 0.02
        assert report["within_tolerance"]


def test_oracle_end_to_end(tmp_path, rows, pool, demo_root, capsys):
    with criterion("oracle end-to-end", 120.0):
        config = SynthConfig(rule_samples=50, compound_fraction=0, target_ratio=0.5, seed=0)
        samples, report = synthesize_dataset(rows, pool, config)
        assert report["partitions"]["rule_single"] == 50
        assert report["partitions"]["no_error"] == 50
        corpus = tmp_path / "batch.jsonl"
        write_jsonl(corpus, [s.to_dict() for s in samples])
        cfg = tmp_path / "config.json"
        cfg.write_text(dump_config({
            "corpus": str(corpus), "db_root": str(demo_root / "databases"),
            "out": str(tmp_path / "out"), "seed": 0,
            "backends": {"detector": {"mock": "oracle_detector"},
                         "localizer": {"mock": "oracle_localizer"},
                         "refiner": {"mock": "oracle_refiner"}}}), encoding="utf-8")
        assert main(["run", "--config", str(cfg), "--json"]) == 0
        ev = json.loads(capsys.readouterr().out)
        assert ev["fr"] == 1.0 and ev["cr"] == 0.0
        assert ev["delta_ex_observed"] == ev["delta_ex_reconstructed"]
        detections = {d["question_id"]: d for d in read_jsonl(tmp_path / "out" / "detection.jsonl")}
        for r in read_jsonl(tmp_path / "out" / "refinement.jsonl"):
            if not detections[r["question_id"]]["flagged"]:
                assert r["refined_sql"] == r["original_sql"]


def test_parser_roundtrip_and_alignment():
    with criterion("parser round-trip and alignment", 30.0):
        corpus = roundtrip_corpus()
        assert len(corpus) >= 200
        for sql in corpus:
            ast = parse_sql(sql)
            assert parse_sql(flatten_ast(ast)).structure() == ast.structure(), sql
        queries = generated_queries(1000)
        for sql in queries:
            ast = parse_sql(sql)
            check_alignment(ast)
            assert parse_sql(flatten_ast(ast)).structure() == ast.structure(), sql


def test_aggregation_algebra():
    seen = []

    @settings(max_examples=1000, derandomize=True)
    @given(label_sets, label_sets)
    def check(rule_set, llm_set):
        seen.append(1)
        final = aggregate(rule_set, llm_set)
        errors = (rule_set | llm_set) - {NO_ERROR}
        assert final == (errors or {NO_ERROR})
        assert aggregate(llm_set, rule_set) == final

    with criterion("aggregation algebra", 10.0):
        check()
        assert len(seen) >= 1000


def test_running_example(running, pool, school_schema):
    with criterion("running example", 5.0):
        db = pool.get("school")
        out = perturb(parse_sql(running["gold_sql"]), school_schema, db, "value_error", seed=0)
        assert "'Complete'" in out.sql and "'Completed'" not in out.sql
        qss = build_qss(running["question"], school_schema)
        assert static_detect(parse_sql(out.sql), qss, db) == {"value_error"}
        row = dict(running, predicted_sql=out.sql)
        det, loc, ref = make_oracle([row])
        res = run_pipeline(sample_from_row(row), db, qss, det, loc, ref)
        assert res.detection.rule_set == {"value_error"}
        assert tokens_for(res.final_labels) == ["[ERR]_7"]
        assert "'Completed'" in res.refined
        assert exec_equivalent(execute(res.refined, db), execute(running["gold_sql"], db))


def test_taxonomy_export():
    with criterion("taxonomy export", 5.0):
        golden.test_types_match_golden_table()
        golden.test_external_mapping_matches_golden_table()
