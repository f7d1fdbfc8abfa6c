import json

import pytest

from sqlrefine.backends import fixed_responder, make_assistant_oracle
from sqlrefine.schema import build_qss
from sqlrefine.synth import (InsufficientCorpus, SynthConfig, dataset_jsonl, llm_inject,
                             synthesize_dataset, verify_dataset)


@pytest.fixture(scope="module")
def oracle_run(rows, pool):
    return synthesize_dataset(rows, pool, SynthConfig(seed=3), make_assistant_oracle(rows))


def test_all_partitions_populated(oracle_run):
    samples, report = oracle_run
    assert all(n > 0 for n in report["partitions"].values())
    assert report["total"] == len(samples)
    assert report["within_tolerance"]
    assert abs(report["correct_ratio"] - 0.49) <= 0.02


def test_sizing_follows_the_assistant_stage(oracle_run):
    _, report = oracle_run
    n_llm = report["partitions"]["llm_injected"]
    n_rule = report["partitions"]["rule_single"] + report["partitions"]["rule_compound"]
    assert n_rule == round(n_llm * 2325 / 2519)
    assert report["partitions"]["rule_compound"] == round(n_rule * 1226 / 2325)


def test_erroneous_samples_reverify(oracle_run, pool):
    samples, _ = oracle_run
    assert verify_dataset(samples, pool) == []


def test_labels_and_sources_are_consistent(oracle_run):
    samples, _ = oracle_run
    for s in samples:
        if s.source == "rule_single":
            assert len(s.labels) == 1 and len(s.mutation_log) >= 1
        elif s.source == "rule_compound":
            assert len(s.labels) == 2
            assert {m[3] for m in s.mutation_log} == set(s.labels)
        elif s.source == "llm_injected":
            assert s.labels
        else:
            assert s.labels == () and s.tokens == ["[ERR]_∅"]


def test_no_error_questions_are_unique(oracle_run):
    samples, _ = oracle_run
    qids = [s.question_id for s in samples if not s.labels]
    assert len(qids) == len(set(qids))


def test_deterministic_under_seed(rows, pool, oracle_run):
    again, _ = synthesize_dataset(rows, pool, SynthConfig(seed=3), make_assistant_oracle(rows))
    assert dataset_jsonl(again) == dataset_jsonl(oracle_run[0])
    other, _ = synthesize_dataset(rows, pool, SynthConfig(seed=4), make_assistant_oracle(rows))
    assert dataset_jsonl(other) != dataset_jsonl(again)


def test_without_assistant(rows, pool):
    samples, report = synthesize_dataset(rows, pool, SynthConfig())
    assert report["partitions"]["llm_injected"] == 0
    assert any("no assistant" in w for w in report["warnings"])
    assert report["within_tolerance"]


def test_assistant_rejections_are_counted(rows, pool):
    junk = fixed_responder("I cannot help")
    _, report = synthesize_dataset(rows, pool, SynthConfig(rule_samples=4), junk)
    llm = report["llm"]
    assert llm["accepted"] == 0 and llm["submitted"] > 0
    assert llm["rejected"] == {"unparseable_labels": llm["submitted"]}


def test_llm_inject_checks_equivalence(running, school, school_schema):
    qss = build_qss(running["question"], school_schema)
    good = fixed_responder(json.dumps({"labels": ["value_error"], "sql": running["gold_sql"]}))
    res = llm_inject(running["question"], qss, running["predicted_sql"], running["gold_sql"],
                     school, good)
    assert res.accepted and res.labels == {"value_error"}
    wrong = fixed_responder(json.dumps({"labels": ["[ERR]_7"], "sql": "SELECT 1"}))
    res = llm_inject(running["question"], qss, running["predicted_sql"], running["gold_sql"],
                     school, wrong)
    assert not res.accepted and res.reason == "not_equivalent"


def test_per_label_minimums(rows, pool):
    with pytest.raises(InsufficientCorpus):
        synthesize_dataset(rows, pool, SynthConfig(rule_samples=2,
                                                   per_label_minimums={"value_error": 500}))


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(target_ratio=1.0)
    with pytest.raises(ValueError):
        SynthConfig(compound_fraction=1.5)
    with pytest.raises(TypeError):
        SynthConfig.from_dict({"colour": "red"})


def test_jsonl_rows(oracle_run):
    lines = dataset_jsonl(oracle_run[0]).splitlines()
    first = json.loads(lines[0])
    assert set(first) >= {"sample_id", "question_id", "db_id", "sql", "labels", "tokens",
                          "source", "gold_sql", "mutation_log"}
