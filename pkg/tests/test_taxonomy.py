import csv
import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from sqlrefine.taxonomy import (NO_ERROR, NULL_TOKEN, ReservedToken, Taxonomy, UnknownErrorType,
                                UnknownToken, label_for, load_taxonomy, normalize_labels,
                                priority, resource_text, token_for, tokens_for)

GOLDEN = Path(__file__).parent / "golden"


def read_tsv(name):
    with (GOLDEN / name).open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def test_types_match_golden_table():
    tax = load_taxonomy()
    exported = tax.export()
    rows = read_tsv("error_types.tsv")
    assert len(exported["types"]) == 12
    by_token = {t["token"]: t for t in exported["types"]}
    for row in rows:
        if row["token"] == NULL_TOKEN:
            assert exported["null"]["display_name"] == row["type"]
            assert tax.doc["null"]["description"] == row["description"]
            continue
        t = by_token[row["token"]]
        assert t["display_name"] == row["type"]
        assert t["description"] == row["description"]
    assert len(rows) == 13


def test_token_indices_are_dense():
    tax = load_taxonomy()
    assert [t.token for t in tax] == [f"[ERR]_{i}" for i in range(1, 13)]
    assert tax.reserved_slots == 32
    exported = tax.export()
    assert exported["reserved"] == [f"[ERR]_{i}" for i in range(13, 33)]
    assert len(tax.vocabulary()) == 33
    assert tax.allowed_tokens()[-1] == NULL_TOKEN
    assert len(tax.allowed_tokens()) == 13


def test_external_mapping_matches_golden_table():
    rows = read_tsv("external_mapping.tsv")
    mapping = load_taxonomy().export()["external_mapping"]
    assert len(mapping) == len(rows) == 31
    tax = load_taxonomy()
    for row, m in zip(rows, mapping):
        assert m["category"] == row["category"]
        assert m["subcategory"] == row["subcategory"]
        if row["token"] == "-":
            assert m["token"] is None and m["error_type"] is None
        else:
            assert m["token"] == row["token"]
            assert tax.get(m["error_type"]).display_name == row["type"]
            assert tax.get(m["error_type"]).token == row["token"]


def test_uncovered_categories():
    unc = load_taxonomy().uncovered_external()
    assert ("Table-related Errors", "Join Type Mismatch") in unc
    assert ("Other Errors", "Other") in unc
    assert len(unc) == 10


def test_static_rule_types():
    assert {t.name for t in load_taxonomy().static_rule_types()} == {"value_error", "table_redundancy"}


def test_priority_follows_tiers():
    order = load_taxonomy().sort_by_priority(["modifier_error", "value_error", "table_missing",
                                              "attribute_missing", "function_error"])
    assert [t.name for t in order] == ["table_missing", "attribute_missing", "value_error",
                                       "function_error", "modifier_error"]
    assert priority("table_mismatch") < priority("attribute_mismatch") < priority("condition_error")


def test_token_lookup():
    assert token_for("value_error") == "[ERR]_7"
    assert token_for(7) == "[ERR]_7"
    assert token_for("Value Error") == "[ERR]_7"
    assert token_for(None) == NULL_TOKEN
    assert label_for("[ERR]_7").name == "value_error"
    assert label_for(NULL_TOKEN) is None


def test_reserved_and_unknown_tokens():
    with pytest.raises(ReservedToken):
        label_for("[ERR]_20")
    for bad in ("[ERR]_33", "[ERR]_0", "ERR_7", "value_error"):
        with pytest.raises(UnknownToken):
            label_for(bad)
    with pytest.raises(UnknownErrorType):
        token_for("syntax_error")


def test_map_external():
    tax = load_taxonomy()
    assert tax.map_external("value_error") == [("Value-related Errors", "Value Mismatch"),
                                               ("Value-related Errors", "Data Format Mismatch")]
    assert tax.categories_for(["condition_error", "modifier_error"]) == {
        "Condition-related Errors", "Other Errors"}


def test_templates_have_unique_slots():
    tax = load_taxonomy()
    for t in tax:
        tpl = tax.template(t)
        slots = [s for s, _ in tpl.localization + tpl.analysis]
        assert slots and len(slots) == len(set(slots))
    assert [s for s, _ in tax.template("value_error").localization][0] == "nodes"


def test_rejects_too_few_slots():
    doc = json.loads(resource_text("taxonomy.json"))
    doc["reserved_slots"] = 8
    with pytest.raises(ValueError):
        Taxonomy(doc)


def test_normalize_labels():
    assert normalize_labels([NULL_TOKEN, NO_ERROR, None]) == frozenset()
    assert normalize_labels(["Value Error", 5, "[ERR]_7"]) == frozenset({"value_error", "table_redundancy"})


@given(st.sets(st.sampled_from([t.name for t in load_taxonomy()])))
def test_tokens_roundtrip(labels):
    toks = tokens_for(labels)
    if not labels:
        assert toks == [NULL_TOKEN]
    else:
        assert {label_for(t).name for t in toks} == labels
        ids = [int(t.split("_")[1]) for t in toks]
        assert ids == sorted(ids)
