"""Detection and refinement metrics, including the accuracy-gain decomposition."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .execution import ExecOutcome, exec_equivalent
from .taxonomy import NO_ERROR, load_taxonomy


class InconsistentRecords(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    question_id: str
    gold_correct_before: bool
    flagged: bool
    gold_correct_after: bool
    changed: bool
    final_labels: frozenset = frozenset()
    gold_labels: Optional[frozenset] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["final_labels"] = sorted(self.final_labels)
        d["gold_labels"] = None if self.gold_labels is None else sorted(self.gold_labels)
        return d


def sample_record(question_id: str, gold: ExecOutcome, original: ExecOutcome,
                  refined: ExecOutcome, flagged: bool, final_labels=(), gold_labels=None,
                  order_sensitive: bool = False) -> SampleRecord:
    """Build a record purely from execution comparisons and the detection verdict."""
    return SampleRecord(
        question_id,
        exec_equivalent(original, gold, order_sensitive),
        flagged,
        exec_equivalent(refined, gold, order_sensitive),
        not _same_execution(original, refined, order_sensitive),
        frozenset(final_labels) - {NO_ERROR},
        None if gold_labels is None else frozenset(gold_labels) - {NO_ERROR},
    )


def _same_execution(a: ExecOutcome, b: ExecOutcome, order_sensitive: bool) -> bool:
    # identical failures count as "unchanged" here: nothing new reached the user
    if not a.ok and not b.ok:
        return a.status == b.status and a.error_message == b.error_message
    return exec_equivalent(a, b, order_sensitive)


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def f1(precision, recall) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def delta_ex(tp: int, fp: int, fr: float, cr: float, total: int) -> float:
    """Net accuracy gain from fixing detected errors and corrupting false alarms."""
    if tp < 0 or fp < 0:
        raise ValueError("counts must be non-negative")
    if total <= 0:
        raise ValueError("total must be positive")
    if not (0 <= fr <= 1 and 0 <= cr <= 1):
        raise ValueError("rates must lie in [0, 1]")
    return (tp * fr - fp * cr) / total


@dataclass
class EvalReport:
    total: int
    ex_before: float
    ex_after: float
    d_accuracy: float
    precision: float
    recall: float
    d_f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    fixed: int
    corrupted: int
    fr: float
    cr: float
    delta_ex_observed: float
    delta_ex_reconstructed: float
    decomposition_exact: bool
    flags: list = field(default_factory=list)
    tsa: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        rows = [("EX before", self.ex_before), ("EX after", self.ex_after),
                ("Delta EX (observed)", self.delta_ex_observed),
                ("Delta EX (reconstructed)", self.delta_ex_reconstructed),
                ("D-Accuracy", self.d_accuracy), ("Precision", self.precision),
                ("Recall", self.recall), ("D-F1", self.d_f1),
                ("|TP|", self.tp), ("|FP|", self.fp), ("|FN|", self.fn), ("|TN|", self.tn),
                ("FR", self.fr), ("CR", self.cr), ("samples (A)", self.total)]
        rows += [(f"TSA {c}", v) for c, v in self.tsa.items()]
        width = max(len(k) for k, _ in rows)
        lines = []
        for k, v in rows:
            shown = f"{v:.4f}" if isinstance(v, float) else str(v)
            lines.append(f"{k.ljust(width)}  {shown.rjust(10)}")
        lines += [f"note: {f}" for f in self.flags]
        return "\n".join(lines) + "\n"


def compute_metrics(records: Sequence[SampleRecord], total: Optional[int] = None) -> EvalReport:
    """Fold sample records into the metric suite.

    ``total`` (A) is the population size and defaults to the record count.
    EX and detection rates are taken over the records; the accuracy gain is
    normalized by A, since samples without a record are never changed.
    """
    records = list(records)
    total = len(records) if total is None else total
    if total < len(records) or total <= 0 or not records:
        raise InconsistentRecords(f"total {total} does not cover {len(records)} records")
    seen = set()
    tp = fp = fn = tn = fixed = corrupted = changed_fp = 0
    correct_before = correct_after = 0
    for r in records:
        if r.question_id in seen:
            raise InconsistentRecords(f"duplicate record {r.question_id}")
        seen.add(r.question_id)
        if not r.flagged and (r.changed or r.gold_correct_after != r.gold_correct_before):
            raise InconsistentRecords(f"unflagged sample {r.question_id} changed")
        if not r.changed and r.gold_correct_after != r.gold_correct_before:
            raise InconsistentRecords(f"{r.question_id} changed correctness without changing results")
        correct_before += r.gold_correct_before
        correct_after += r.gold_correct_after
        incorrect = not r.gold_correct_before
        if r.flagged and incorrect:
            tp += 1
            fixed += r.gold_correct_after
        elif r.flagged:
            fp += 1
            changed_fp += r.changed
            corrupted += not r.gold_correct_after
        elif incorrect:
            fn += 1
        else:
            tn += 1
    flags = []
    if tp == 0:
        flags.append("FR undefined (no true positives); reported as 0")
    if fp == 0:
        flags.append("CR undefined (no false positives); reported as 0")
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    fr = _ratio(fixed, tp)
    cr = _ratio(changed_fp, fp)
    observed = Fraction(correct_after - correct_before, total)
    reconstructed = (tp * fr - fp * cr) / total
    if observed != reconstructed:
        flags.append("Delta EX decomposition does not hold: some changed false positive stayed correct")
    return EvalReport(
        total=total,
        ex_before=float(_ratio(correct_before, len(records))),
        ex_after=float(_ratio(correct_after, len(records))),
        d_accuracy=float(_ratio(tp + tn, len(records))),
        precision=float(precision), recall=float(recall), d_f1=float(f1(precision, recall)),
        tp=tp, fp=fp, fn=fn, tn=tn, fixed=fixed, corrupted=corrupted,
        fr=float(fr), cr=float(cr),
        delta_ex_observed=float(observed), delta_ex_reconstructed=float(reconstructed),
        decomposition_exact=observed == reconstructed,
        flags=flags, tsa=type_specific_accuracy(records),
    )


def type_specific_accuracy(records: Iterable[SampleRecord]) -> dict[str, float]:
    """Per external category: share of samples labeled with it whose prediction also has it."""
    tax = load_taxonomy()
    hits: dict[str, int] = {}
    support: dict[str, int] = {}
    for r in records:
        if r.gold_labels is None:
            continue
        gold = tax.categories_for(r.gold_labels)
        pred = tax.categories_for(r.final_labels)
        for c in gold:
            support[c] = support.get(c, 0) + 1
            hits[c] = hits.get(c, 0) + (c in pred)
    return {c: hits[c] / support[c] for c in tax.external_categories() if c in support}
