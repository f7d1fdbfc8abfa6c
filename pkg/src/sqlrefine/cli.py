"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration or I/O problem.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .backends import ConfigError, build_backend
from .detection import detect, detection_record
from .execution import (DEFAULT_TIMEOUT_MS, DatabaseIOError, DatabasePool, CorruptDatabaseError,
                        execute, order_matters)
from .metrics import InconsistentRecords, compute_metrics, sample_record
from .records import CorpusFormatError, read_jsonl, sample_from_row, write_jsonl
from .refinement import ExampleStore, run_pipeline
from .schema import (SchemaLinkingResult, build_qss, introspect_schema, link_values,
                     serialize_mschema)
from .sqlast import ParseError, parse_sql
from .synth import InsufficientCorpus, SynthConfig, dataset_jsonl, synthesize_dataset
from .taxonomy import NO_ERROR, load_taxonomy, normalize_labels

log = logging.getLogger("sqlrefine")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


# --------------------------------------------------------------------------
# Configuration


@dataclass
class RunConfig:
    corpus: Path
    db_root: Path
    out: Path
    seed: int = 0
    jobs: int = 1
    backends: dict = field(default_factory=dict)
    synthesis: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    schema_linking: Optional[Path] = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def order_sensitive(self) -> Optional[bool]:
        return self.evaluation.get("order_sensitive")

    @property
    def timeout_ms(self) -> int:
        return int(self.evaluation.get("timeout_ms", DEFAULT_TIMEOUT_MS))

    def dumps(self) -> str:
        return dump_config(self.raw)


def dump_config(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _interpolate(value):
    """Replace ``${VAR}`` in backend settings with environment values."""
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, str):
        def sub(m):
            if m.group(1) not in os.environ:
                raise ConfigError(f"environment variable {m.group(1)} is not set")
            return os.environ[m.group(1)]
        return _ENV_REF.sub(sub, value)
    return value


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw, base=Path(path).parent, overrides=overrides)


def config_from_dict(raw: dict, base: Path = Path("."), overrides: Optional[dict] = None) -> RunConfig:
    doc = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    unknown = set(doc) - {"corpus", "db_root", "out", "seed", "jobs", "backends", "synthesis",
                          "evaluation", "schema_linking"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for req in ("corpus", "db_root"):
        if req not in doc:
            raise ConfigError(f"config needs {req}")

    def path(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    cfg = RunConfig(
        corpus=path(doc["corpus"]), db_root=path(doc["db_root"]),
        out=path(doc.get("out", "out")), seed=int(doc.get("seed", 0)),
        jobs=int(doc.get("jobs", 1)),
        backends=_interpolate(doc.get("backends", {})),
        synthesis=dict(doc.get("synthesis", {})), evaluation=dict(doc.get("evaluation", {})),
        schema_linking=path(doc["schema_linking"]) if doc.get("schema_linking") else None,
        raw=raw,
    )
    for role in cfg.backends:
        if role not in ("detector", "localizer", "refiner", "assistant"):
            raise ConfigError(f"unknown backend role {role!r}")
    if not cfg.corpus.is_file():
        raise ConfigError(f"corpus not found: {cfg.corpus}")
    if not cfg.db_root.is_dir():
        raise ConfigError(f"database root not found: {cfg.db_root}")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return cfg


# --------------------------------------------------------------------------
# Shared run machinery


class _Batch:
    """Per-run caches: databases, schema graphs, backends, linking results."""

    def __init__(self, cfg: RunConfig, rows: list[dict]):
        self.cfg = cfg
        self.rows = rows
        self.pool = DatabasePool(cfg.db_root)
        self._schemas: dict = {}
        self._lock = threading.Lock()
        self.linking = {}
        if cfg.schema_linking is not None:
            doc = json.loads(cfg.schema_linking.read_text(encoding="utf-8"))
            self.linking = {k: SchemaLinkingResult.from_json(v) for k, v in doc.items()}
        self.backends = {role: build_backend(sec, fixtures=rows)
                         for role, sec in cfg.backends.items()}
        self.store = ExampleStore.default()

    def schema(self, db_id: str):
        with self._lock:
            if db_id not in self._schemas:
                self._schemas[db_id] = introspect_schema(self.pool.get(db_id))
            return self._schemas[db_id]

    def qss(self, row: dict, db):
        schema = self.schema(row["db_id"])
        links = link_values(row["question"], schema, db)
        return build_qss(row["question"], schema, self.linking.get(str(row["question_id"])), links)

    def map(self, fn, items):
        if self.cfg.jobs == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.cfg.jobs) as ex:
            return list(ex.map(fn, items))  # results come back in input order

    def order_sensitive(self, gold_sql: str) -> bool:
        forced = self.cfg.order_sensitive
        return order_matters(gold_sql) if forced is None else bool(forced)


def _gold_labels(row: dict):
    if "labels" in row:
        return normalize_labels(row["labels"])
    if isinstance(row.get("annotation"), dict):
        return normalize_labels(row["annotation"].get("labels", ()))
    return None


def _read_rows(cfg: RunConfig) -> list[dict]:
    rows = read_jsonl(cfg.corpus)
    for i, row in enumerate(rows):
        for f in ("question_id", "db_id", "question"):
            if f not in row:
                raise CorpusFormatError(f"row {i} lacks {f}")
    return rows


def _pipeline_one(batch: _Batch, row: dict, refine_stage: bool):
    sample = sample_from_row(row)
    b = batch.backends
    try:
        db = batch.pool.get(row["db_id"])
        qss = batch.qss(row, db)
        if refine_stage:
            res = run_pipeline(sample, db, qss, b.get("detector"), b.get("localizer"),
                               b.get("refiner"), batch.store)
            return sample, res.detection_record(), res.record(), res.refined
        try:
            ast = parse_sql(sample.sql)
        except ParseError:
            ast = None
        det = detect(sample, qss, ast, db, b.get("detector"))
        return sample, detection_record(sample, det), None, sample.sql
    except Exception as exc:  # per-sample failures never abort the batch
        msg = f"{type(exc).__name__}: {exc}"
        log.warning("sample %s failed: %s", sample.key, msg)
        det = {"question_id": sample.key, "final": [NO_ERROR], "flagged": False,
               "rule_errors": [], "llm_errors": [], "raw_tokens": [], "errors": [msg]}
        ref = {"question_id": sample.key, "original_sql": sample.sql, "final_labels": [NO_ERROR],
               "localizations": [], "refined_sql": sample.sql, "status": "error",
               "errors": [msg]}
        return sample, det, ref, sample.sql


def _eval_records(batch: _Batch, rows, results):
    records, skipped = [], []
    for row, (sample, det, _ref, refined) in zip(rows, results):
        gold_sql = row.get("gold_sql")
        if not gold_sql:
            skipped.append(sample.key)
            continue
        try:
            db = batch.pool.get(row["db_id"])
        except (DatabaseIOError, CorruptDatabaseError):
            skipped.append(sample.key)
            continue
        t = batch.cfg.timeout_ms
        gold = execute(gold_sql, db, t)
        original = execute(sample.sql, db, t)
        after = original if refined == sample.sql else execute(refined, db, t)
        final = [] if not det.get("flagged") else det["final"]
        records.append(sample_record(sample.key, gold, original, after, bool(det.get("flagged")),
                                     final, _gold_labels(row), batch.order_sensitive(gold_sql)))
    return records, skipped


# --------------------------------------------------------------------------
# Commands


def cmd_introspect(args) -> int:
    try:
        schema = introspect_schema(args.db_path)
    except (DatabaseIOError, CorruptDatabaseError, FileNotFoundError) as exc:
        print(f"IoError: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(json.dumps(schema.to_json(), indent=2, ensure_ascii=False))
    else:
        print(serialize_mschema(build_qss("", schema)))
    return EXIT_OK


def cmd_taxonomy(args) -> int:
    text = json.dumps(load_taxonomy().export(), indent=2, ensure_ascii=False) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    rows = _read_rows(cfg)
    params = dict(cfg.synthesis)
    params["seed"] = cfg.seed
    try:
        synth_cfg = SynthConfig.from_dict(params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad synthesis settings: {exc}") from exc
    backend = None
    if "assistant" in cfg.backends:
        backend = build_backend(cfg.backends["assistant"], fixtures=rows)
    try:
        samples, report = synthesize_dataset(rows, cfg.db_root, synth_cfg, backend)
    except InsufficientCorpus as exc:
        print(f"InsufficientCorpus: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "dataset.jsonl").write_text(dataset_jsonl(samples), encoding="utf-8")
    (cfg.out / "composition.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
    for w in report["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        for p, n in report["partitions"].items():
            print(f"{p:<14}{n:>6}  {report['proportions'][p]:.1%}")
        print(f"{'total':<14}{report['total']:>6}")
    return EXIT_OK


def _run_batch(cfg: RunConfig, refine_stage: bool):
    rows = _read_rows(cfg)
    batch = _Batch(cfg, rows)
    results = batch.map(lambda r: _pipeline_one(batch, r, refine_stage), rows)
    return batch, rows, results


def cmd_detect(cfg: RunConfig, args) -> int:
    _batch, _rows, results = _run_batch(cfg, refine_stage=False)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_jsonl(cfg.out / "detection.jsonl", [d for _, d, _, _ in results])
    flagged = sum(1 for _, d, _, _ in results if d.get("flagged"))
    print(f"{len(results)} samples, {flagged} flagged")
    return EXIT_OK


def cmd_refine(cfg: RunConfig, args) -> int:
    _batch, _rows, results = _run_batch(cfg, refine_stage=True)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_jsonl(cfg.out / "detection.jsonl", [d for _, d, _, _ in results])
    write_jsonl(cfg.out / "refinement.jsonl", [r for _, _, r, _ in results])
    print(_status_summary(results))
    return EXIT_OK


def _status_summary(results) -> str:
    counts: dict = {}
    for _, _, r, _ in results:
        counts[r["status"]] = counts.get(r["status"], 0) + 1
    return ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))


def cmd_run(cfg: RunConfig, args) -> int:
    batch, rows, results = _run_batch(cfg, refine_stage=True)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_jsonl(cfg.out / "detection.jsonl", [d for _, d, _, _ in results])
    write_jsonl(cfg.out / "refinement.jsonl", [r for _, _, r, _ in results])
    return _evaluate(cfg, batch, rows, results, args)


def _evaluate(cfg, batch, rows, results, args) -> int:
    records, skipped = _eval_records(batch, rows, results)
    write_jsonl(cfg.out / "records.jsonl", [r.to_dict() for r in records])
    try:
        report = compute_metrics(records)
    except InconsistentRecords as exc:
        print(f"InconsistentRecords: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    doc = report.to_dict()
    doc["skipped"] = skipped
    (cfg.out / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    summary = report.table()
    if results and results[0][2] is not None:
        summary += f"pipeline status: {_status_summary(results)}\n"
    if skipped:
        summary += f"skipped (no gold or database): {len(skipped)}\n"
    (cfg.out / "summary.txt").write_text(summary, encoding="utf-8")
    print(json.dumps(doc, indent=2, sort_keys=True) if args.json else summary, end="")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    """Score an existing refinement report against the corpus gold SQLs."""
    rows = _read_rows(cfg)
    path = Path(args.refinement) if args.refinement else cfg.out / "refinement.jsonl"
    try:
        reports = {r["question_id"]: r for r in read_jsonl(path)}
    except OSError as exc:
        raise ConfigError(f"cannot read refinement report {path}: {exc}") from exc
    batch = _Batch(cfg, rows)
    results = []
    for row in rows:
        sample = sample_from_row(row)
        rep = reports.get(sample.key)
        if rep is None:
            raise ConfigError(f"refinement report lacks sample {sample.key}")
        flagged = rep["final_labels"] != [NO_ERROR]
        det = {"flagged": flagged, "final": rep["final_labels"]}
        results.append((sample, det, rep, rep["refined_sql"]))
    cfg.out.mkdir(parents=True, exist_ok=True)
    return _evaluate(cfg, batch, rows, results, args)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sqlrefine", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("introspect", help="print the schema graph of a SQLite file")
    s.add_argument("db_path")
    s.add_argument("--json", action="store_true", help="structured graph JSON")

    def run_flags(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--db-root")
        sp.add_argument("--out")
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--order-sensitive", action="store_true", default=None)
        sp.add_argument("--json", action="store_true")

    for name, help_ in (("synth", "build a labeled dataset"), ("detect", "detect errors"),
                        ("refine", "detect and refine"), ("run", "detect, refine and evaluate"),
                        ("eval", "score a refinement report")):
        sp = sub.add_parser(name, help=help_)
        run_flags(sp)
        if name == "eval":
            sp.add_argument("--refinement", help="refinement JSONL (default: <out>/refinement.jsonl)")

    t = sub.add_parser("taxonomy", help="taxonomy utilities")
    tsub = t.add_subparsers(dest="action", required=True)
    te = tsub.add_parser("export", help="write the taxonomy as JSON")
    te.add_argument("--out")
    return p


COMMANDS = {"synth": cmd_synth, "detect": cmd_detect, "refine": cmd_refine, "run": cmd_run,
            "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "introspect":
        return cmd_introspect(args)
    if args.command == "taxonomy":
        return cmd_taxonomy(args)
    try:
        # command-line paths are relative to the working directory
        overrides = {"seed": args.seed, "jobs": args.jobs,
                     "db_root": args.db_root and str(Path(args.db_root).resolve()),
                     "out": args.out and str(Path(args.out).resolve())}
        cfg = load_config(args.config, overrides)
        if args.order_sensitive:
            cfg.evaluation["order_sensitive"] = True
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, CorpusFormatError, DatabaseIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.exception("run failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
