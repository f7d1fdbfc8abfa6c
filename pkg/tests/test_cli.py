import json
import subprocess
import sys

import pytest

from sqlrefine.backends import ConfigError
from sqlrefine.cli import config_from_dict, dump_config, load_config, main

ORACLE = {"detector": {"mock": "oracle_detector"}, "localizer": {"mock": "oracle_localizer"},
          "refiner": {"mock": "oracle_refiner"}}


def write_config(tmp_path, demo_root, **extra):
    doc = {"corpus": str(demo_root / "corpus.jsonl"), "db_root": str(demo_root / "databases"),
           "out": str(tmp_path / "out"), "seed": 1, "backends": ORACLE}
    doc.update(extra)
    path = tmp_path / "config.json"
    path.write_text(dump_config(doc), encoding="utf-8")
    return path


def test_config_roundtrip(tmp_path, demo_root):
    path = write_config(tmp_path, demo_root, evaluation={"order_sensitive": False})
    cfg = load_config(path)
    assert json.loads(cfg.dumps()) == json.loads(path.read_text())
    assert dump_config(json.loads(cfg.dumps())) == cfg.dumps()
    assert cfg.seed == 1 and cfg.order_sensitive is False


def test_relative_paths_follow_the_config_file(tmp_path, demo_root):
    import shutil
    shutil.copytree(demo_root, tmp_path / "demo")
    cfg = config_from_dict({"corpus": "demo/corpus.jsonl", "db_root": "demo/databases"},
                           base=tmp_path)
    assert cfg.corpus == tmp_path / "demo" / "corpus.jsonl"
    assert cfg.out == tmp_path / "out"


@pytest.mark.parametrize("raw", [
    {"db_root": "."},
    {"corpus": "x.jsonl", "db_root": "."},
    {"corpus": "c.jsonl", "db_root": ".", "colour": "red"},
    {"corpus": "c.jsonl", "db_root": ".", "backends": {"oracle": {}}},
    {"corpus": "c.jsonl", "db_root": ".", "jobs": 0},
])
def test_config_errors(tmp_path, raw):
    (tmp_path / "c.jsonl").write_text("", encoding="utf-8")
    with pytest.raises(ConfigError):
        config_from_dict(raw, base=tmp_path)


def test_env_interpolation(tmp_path, demo_root, monkeypatch):
    monkeypatch.setenv("LLM_URL", "http://llm.test/v1")
    path = write_config(tmp_path, demo_root,
                        backends={"detector": {"base_url": "${LLM_URL}", "model_name": "m"}})
    assert load_config(path).backends["detector"]["base_url"] == "http://llm.test/v1"
    monkeypatch.delenv("LLM_URL")
    with pytest.raises(ConfigError):
        load_config(path)


def test_exit_codes(tmp_path, demo_root, capsys):
    assert main(["introspect", str(tmp_path / "missing.sqlite")]) == 2
    assert "IoError" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert main(["run", "--config", str(bad)]) == 2
    path = write_config(tmp_path, demo_root)
    assert main(["run", "--config", str(path), "--db-root", str(tmp_path / "void")]) == 2
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_introspect_and_taxonomy(tmp_path, demo_root, capsys):
    db = demo_root / "databases" / "school" / "school.sqlite"
    assert main(["introspect", str(db), "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["db_id"] == "school"
    assert main(["introspect", str(db)]) == 0
    assert "# Table: student" in capsys.readouterr().out
    out = tmp_path / "tax.json"
    assert main(["taxonomy", "export", "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())["types"]) == 12


def test_run_writes_complete_reports(tmp_path, demo_root, capsys):
    path = write_config(tmp_path, demo_root)
    assert main(["run", "--config", str(path), "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    out = tmp_path / "out"
    for name in ("detection.jsonl", "refinement.jsonl", "records.jsonl", "eval.json", "summary.txt"):
        assert (out / name).is_file(), name
    for key in ("ex_before", "ex_after", "precision", "recall", "d_f1", "d_accuracy", "fr", "cr",
                "delta_ex_observed", "delta_ex_reconstructed", "tp", "fp", "fn", "tn", "tsa",
                "flags", "skipped"):
        assert key in report, key
    assert report["fr"] == 1.0 and report["cr"] == 0.0
    assert report["delta_ex_observed"] == report["delta_ex_reconstructed"]
    assert report["ex_after"] == 1.0
    summary = (out / "summary.txt").read_text()
    assert "pipeline status" in summary


def test_run_is_deterministic_across_jobs(tmp_path, demo_root):
    path = write_config(tmp_path, demo_root)
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "b"), "--jobs", "4"]) == 0
    for name in ("detection.jsonl", "refinement.jsonl", "records.jsonl", "eval.json"):
        assert (tmp_path / "a" / name).read_text() == (tmp_path / "b" / name).read_text(), name


def test_detect_then_eval(tmp_path, demo_root, capsys):
    path = write_config(tmp_path, demo_root)
    assert main(["detect", "--config", str(path)]) == 0
    assert "flagged" in capsys.readouterr().out
    assert main(["refine", "--config", str(path)]) == 0
    assert "refined=" in capsys.readouterr().out
    assert main(["eval", "--config", str(path), "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["fr"] == 1.0


def test_eval_requires_full_report(tmp_path, demo_root):
    path = write_config(tmp_path, demo_root)
    partial = tmp_path / "partial.jsonl"
    partial.write_text("", encoding="utf-8")
    assert main(["eval", "--config", str(path), "--refinement", str(partial)]) == 2


def test_synth_command(tmp_path, demo_root, capsys):
    path = write_config(tmp_path, demo_root,
                        backends={"assistant": {"mock": "oracle_assistant"}})
    assert main(["synth", "--config", str(path)]) == 0
    comp = json.loads((tmp_path / "out" / "composition.json").read_text())
    lines = (tmp_path / "out" / "dataset.jsonl").read_text().splitlines()
    assert comp["total"] == len(lines)
    assert comp["within_tolerance"]
    capsys.readouterr()
    bad = write_config(tmp_path, demo_root, synthesis={"colour": "red"})
    assert main(["synth", "--config", str(bad)]) == 2


def test_failing_backend_does_not_abort_the_batch(tmp_path, demo_root, capsys):
    path = write_config(tmp_path, demo_root, backends={
        "detector": {"mock": "failing"}, "localizer": {"mock": "oracle_localizer"},
        "refiner": {"mock": "oracle_refiner"}})
    assert main(["run", "--config", str(path), "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["tp"] >= 1  # static rules still catch the value error


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "sqlrefine.cli", "taxonomy", "export"],
                         capture_output=True, text=True, check=True)
    assert json.loads(out.stdout)["reserved_slots"] == 32
