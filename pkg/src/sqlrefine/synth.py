"""Labeled dataset synthesis: assistant annotation, rule perturbation, no-error sampling.

Stages run in a fixed order.  Assistant-annotated incorrect predictions come
first because their count sizes the rule-based complement; rule perturbations
then cover all error types; no-error samples finally balance the
correct:incorrect ratio.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import random
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .backends import BackendError
from .execution import Database, DatabasePool, exec_equivalent, execute, order_matters
from .perturb import INCOMPATIBLE_PAIRS, compose, perturb
from .prompts import extract_sql, format_sections
from .records import dumps_jsonl
from .schema import (QuestionSchemaStructure, SchemaGraph, build_qss, introspect_schema,
                     serialize_mschema)
from .sqlast import ParseError, parse_sql
from .taxonomy import load_taxonomy, normalize_labels, tokens_for

log = logging.getLogger(__name__)

SOURCES = ("rule_single", "rule_compound", "llm_injected", "gold_correct", "pred_correct")
PARTITIONS = ("no_error", "rule_single", "rule_compound", "llm_injected")

# reference composition: 1,099 single + 1,226 compound rule samples next to
# 2,519 assistant-annotated ones
RULE_PER_LLM = 2325 / 2519
COMPOUND_FRACTION = 1226 / 2325

ASSISTANT_SYSTEM = ("You annotate wrong SQL queries. Name the error types present and give the "
                    "corrected SQL. Answer with JSON: {\"labels\": [type names], \"sql\": \"...\"}.")


class InsufficientCorpus(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    target_ratio: float = 0.49  # share of no-error samples
    tolerance: float = 0.02
    compound_fraction: float = COMPOUND_FRACTION
    rule_per_llm: float = RULE_PER_LLM
    rule_samples: Optional[int] = None  # overrides the size derived from the assistant stage
    per_label_minimums: dict = field(default_factory=dict)
    max_attempts_per_pair: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.target_ratio < 1:
            raise ValueError("target_ratio must be in (0, 1)")
        if not 0 <= self.compound_fraction <= 1:
            raise ValueError("compound_fraction must be in [0, 1]")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass(frozen=True)
class SynthSample:
    sample_id: str
    question_id: str
    db_id: str
    question: str
    sql: str
    labels: tuple[str, ...]
    source: str
    gold_sql: str
    mutation_log: tuple = ()

    @property
    def tokens(self) -> list[str]:
        return tokens_for(self.labels)

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "question_id": self.question_id,
                "db_id": self.db_id, "question": self.question, "sql": self.sql,
                "labels": list(self.labels), "tokens": self.tokens, "source": self.source,
                "gold_sql": self.gold_sql,
                "mutation_log": [list(m) for m in self.mutation_log]}


def _ordered_labels(labels) -> tuple[str, ...]:
    tax = load_taxonomy()
    return tuple(sorted(normalize_labels(labels), key=lambda n: tax.get(n).id))


def _seed_for(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# --------------------------------------------------------------------------
# Assistant-based injection


@dataclass(frozen=True)
class InjectionResult:
    accepted: bool
    labels: frozenset = frozenset()
    refined_sql: str = ""
    reason: str = ""


_JSON_OBJ = re.compile(r"\{.*\}", re.DOTALL)


def _parse_assistant(raw: str) -> tuple[Optional[frozenset], str]:
    m = _JSON_OBJ.search(raw)
    if not m:
        return None, ""
    try:
        doc = json.loads(m.group(0))
        labels = normalize_labels(doc["labels"])
        sql = str(doc.get("sql", ""))
    except (ValueError, KeyError, TypeError):
        return None, ""
    return (labels or None), sql


def llm_inject(question: str, qss: QuestionSchemaStructure, predicted_sql: str, gold_sql: str,
               db: Database, backend) -> InjectionResult:
    """Ask the assistant for labels and a fix; keep the labels only if the fix matches gold."""
    feedback = execute(predicted_sql, db)
    prompt = format_sections([
        ("Error Types", load_taxonomy().instructions()),
        ("Question", question), ("Schema", serialize_mschema(qss)),
        ("SQL", predicted_sql), ("Execution Result", feedback.feedback()),
    ])
    raw = backend.complete(ASSISTANT_SYSTEM, prompt)
    labels, sql = _parse_assistant(raw)
    if labels is None:
        return InjectionResult(False, reason="unparseable_labels")
    sql = extract_sql(sql)
    gold = execute(gold_sql, db)
    if not exec_equivalent(execute(sql, db), gold, order_matters(gold_sql)):
        return InjectionResult(False, labels, sql, "not_equivalent")
    return InjectionResult(True, labels, sql)


# --------------------------------------------------------------------------
# Builder


@dataclass
class _Source:
    question_id: str
    db_id: str
    question: str
    sql: str
    gold_sql: str
    kind: str  # gold_correct or pred_correct


class _Resources:
    def __init__(self, pool: DatabasePool):
        self.pool = pool
        self._schemas: dict[str, SchemaGraph] = {}

    def db(self, db_id: str) -> Database:
        return self.pool.get(db_id)

    def schema(self, db_id: str) -> SchemaGraph:
        if db_id not in self._schemas:
            self._schemas[db_id] = introspect_schema(self.db(db_id))
        return self._schemas[db_id]


def _correct_sources(corpus: Sequence[dict]) -> list[_Source]:
    out = []
    for row in corpus:
        qid = str(row["question_id"])
        out.append(_Source(qid, row["db_id"], row["question"], row["gold_sql"], row["gold_sql"],
                           "gold_correct"))
        pred = row.get("predicted_sql")
        if pred and row.get("pred_correct"):
            out.append(_Source(qid, row["db_id"], row["question"], pred, row["gold_sql"],
                               "pred_correct"))
    return out


def _llm_stage(corpus, res: _Resources, backend, stats: dict) -> list[SynthSample]:
    out = []
    for row in corpus:
        pred = row.get("predicted_sql")
        if not pred or row.get("pred_correct", False):
            continue
        db = res.db(row["db_id"])
        if exec_equivalent(execute(pred, db), execute(row["gold_sql"], db),
                           order_matters(row["gold_sql"])):
            continue  # flagged incorrect but actually matches gold: not an error sample
        stats["submitted"] += 1
        qss = build_qss(row["question"], res.schema(row["db_id"]))
        try:
            result = llm_inject(row["question"], qss, pred, row["gold_sql"], db, backend)
        except BackendError as exc:
            log.warning("assistant failed on %s: %s", row["question_id"], exc)
            result = InjectionResult(False, reason="backend_error")
        if not result.accepted:
            stats["rejected"][result.reason] = stats["rejected"].get(result.reason, 0) + 1
            continue
        stats["accepted"] += 1
        out.append(SynthSample("", str(row["question_id"]), row["db_id"], row["question"], pred,
                               _ordered_labels(result.labels), "llm_injected", row["gold_sql"]))
    return out


def _rule_stage(sources: list[_Source], res: _Resources, n_single: int, n_compound: int,
                config: SynthConfig) -> tuple[list[SynthSample], list[SynthSample]]:
    tax = load_taxonomy()
    labels = [t.name for t in tax]
    parsed = {}
    for i, s in enumerate(sources):
        try:
            parsed[i] = parse_sql(s.sql)
        except ParseError:
            log.warning("skipping unparseable source %s", s.question_id)

    def attempt(i: int, combo: tuple[str, ...]):
        s = sources[i]
        seed = _seed_for(config.seed, s.question_id, s.kind, *combo)
        db, schema = res.db(s.db_id), res.schema(s.db_id)
        if len(combo) == 1:
            outcome = perturb(parsed[i], schema, db, combo[0], seed)
        else:
            outcome = compose(parsed[i], schema, db, combo, seed)
        if not outcome.applied:
            return None
        source = "rule_single" if len(combo) == 1 else "rule_compound"
        log_ = tuple((m.node_id, m.before, m.after, m.label) for m in outcome.mutation_log)
        return SynthSample("", s.question_id, s.db_id, s.question, outcome.sql,
                           _ordered_labels(combo), source, s.gold_sql, log_)

    def fill(combos: list[tuple[str, ...]], target: int, tag: str, limit: Optional[int]):
        rng = random.Random(_seed_for(config.seed, tag))
        queues = {}
        for c in combos:
            order = sorted(parsed)
            rng.shuffle(order)
            queues[c] = order[:limit] if limit else order
        out = []
        active = list(combos)
        while len(out) < target and active:
            for c in list(active):
                if len(out) >= target:
                    break
                sample = None
                while queues[c] and sample is None:
                    sample = attempt(queues[c].pop(0), c)
                if sample is None:
                    active.remove(c)
                else:
                    out.append(sample)
        return out

    singles = fill([(l,) for l in labels], n_single, "single", None)
    pairs = [(a, b) for a, b in itertools.combinations(labels, 2)
             if frozenset({a, b}) not in INCOMPATIBLE_PAIRS]
    compounds = fill(pairs, n_compound, "compound", config.max_attempts_per_pair)
    return singles, compounds


def _no_error_stage(sources: list[_Source], n: int, config: SynthConfig) -> list[SynthSample]:
    by_qid: dict[str, list[_Source]] = {}
    for s in sources:
        by_qid.setdefault(s.question_id, []).append(s)
    rng = random.Random(_seed_for(config.seed, "no_error"))
    qids = sorted(by_qid)
    rng.shuffle(qids)
    out = []
    for qid in qids[:n]:
        s = rng.choice(by_qid[qid])
        out.append(SynthSample("", s.question_id, s.db_id, s.question, s.sql, (), s.kind,
                               s.gold_sql))
    return out


def synthesize_dataset(corpus: Sequence[dict], db_root, config: Optional[SynthConfig] = None,
                       backend=None) -> tuple[list[SynthSample], dict]:
    """Build the labeled dataset and its composition report."""
    config = config or SynthConfig()
    pool = db_root if isinstance(db_root, DatabasePool) else DatabasePool(db_root)
    res = _Resources(pool)
    warnings = []
    stats = {"submitted": 0, "accepted": 0, "rejected": {}}
    if backend is None:
        warnings.append("no assistant backend configured: llm_injected partition is empty")
        llm = []
    else:
        llm = _llm_stage(corpus, res, backend, stats)

    sources = _correct_sources(corpus)
    if config.rule_samples is not None:
        n_rule = config.rule_samples
    elif llm:
        n_rule = round(len(llm) * config.rule_per_llm)
    else:
        # nothing to complement: one perturbation per distinct question
        n_rule = len({s.question_id for s in sources})
    n_rule = max(n_rule, sum(config.per_label_minimums.values()))
    n_compound = round(n_rule * config.compound_fraction)
    singles, compounds = _rule_stage(sources, res, n_rule - n_compound, n_compound, config)

    per_label = {t.name: 0 for t in load_taxonomy()}
    for s in llm + singles + compounds:
        for l in s.labels:
            per_label[l] += 1
    short = {l: (per_label.get(l, 0), m) for l, m in config.per_label_minimums.items()
             if per_label.get(l, 0) < m}
    if short:
        detail = ", ".join(f"{l} {have}/{need}" for l, (have, need) in sorted(short.items()))
        raise InsufficientCorpus(f"per-label minimums not met: {detail}")

    n_err = len(llm) + len(singles) + len(compounds)
    n_correct = round(n_err * config.target_ratio / (1 - config.target_ratio))
    no_error = _no_error_stage(sources, n_correct, config)

    samples = []
    for i, s in enumerate(llm + singles + compounds + no_error):
        samples.append(SynthSample(f"s{i:05d}", s.question_id, s.db_id, s.question, s.sql,
                                   s.labels, s.source, s.gold_sql, s.mutation_log))

    shortfalls = []
    if len(no_error) < n_correct:
        shortfalls.append(f"no_error: {len(no_error)} of {n_correct} (too few distinct questions)")
    if len(singles) < n_rule - n_compound:
        shortfalls.append(f"rule_single: {len(singles)} of {n_rule - n_compound}")
    if len(compounds) < n_compound:
        shortfalls.append(f"rule_compound: {len(compounds)} of {n_compound}")
    if not llm:
        shortfalls.append("llm_injected: empty")
    report = composition_report(samples, config, stats, per_label, shortfalls, warnings)
    return samples, report


def composition_report(samples: Sequence[SynthSample], config: SynthConfig, stats: dict,
                       per_label: dict, shortfalls: list, warnings: list) -> dict:
    counts = {p: 0 for p in PARTITIONS}
    by_source = {s: 0 for s in SOURCES}
    for s in samples:
        by_source[s.source] += 1
        counts["no_error" if s.source in ("gold_correct", "pred_correct") else s.source] += 1
    total = len(samples)
    correct_ratio = counts["no_error"] / total if total else 0.0
    submitted = stats["submitted"]
    return {
        "total": total,
        "partitions": counts,
        "proportions": {p: (round(c / total, 4) if total else 0.0) for p, c in counts.items()},
        "sources": by_source,
        "correct_ratio": round(correct_ratio, 4),
        "target_ratio": config.target_ratio,
        "within_tolerance": abs(correct_ratio - config.target_ratio) <= config.tolerance,
        "per_label": per_label,
        "llm": {"submitted": submitted, "accepted": stats["accepted"],
                "rejected": dict(sorted(stats["rejected"].items())),
                "acceptance_rate": round(stats["accepted"] / submitted, 4) if submitted else 0.0},
        "shortfalls": shortfalls,
        "warnings": warnings,
        "seed": config.seed,
    }


def dataset_jsonl(samples: Sequence[SynthSample]) -> str:
    return dumps_jsonl(s.to_dict() for s in samples)


def verify_dataset(samples: Sequence[SynthSample], db_root) -> list[str]:
    """Re-execute every erroneous sample; ids whose result matches gold (or whose gold fails)."""
    pool = db_root if isinstance(db_root, DatabasePool) else DatabasePool(db_root)
    bad = []
    for s in samples:
        if not s.labels:
            continue
        db = pool.get(s.db_id)
        gold = execute(s.gold_sql, db)
        if not gold.ok or exec_equivalent(execute(s.sql, db), gold, order_matters(s.gold_sql)):
            bad.append(s.sample_id)
    return bad
