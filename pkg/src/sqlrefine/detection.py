"""Error detection: static rules, constrained model detection, and aggregation."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Optional, Union

from .execution import Database, ExecOutcome, execute
from .prompts import format_sections
from .records import Sample
from .rules import (_bound_table, _in_join_using, _nearest_query, _visible_tables,
                    table_redundancy_rule, value_error_rule)
from .schema import QuestionSchemaStructure, SchemaGraph, serialize_mschema
from .sqlast import ParseError, SqlAst, parse_sql, render_tree, unquote_identifier
from .taxonomy import NO_ERROR, NULL_TOKEN, ReservedToken, UnknownToken, load_taxonomy

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 2
FEEDBACK_ROWS = 5

DETECTOR_SYSTEM = ("You check SQL queries for errors. Reply only with error tokens "
                   "separated by spaces, or the no-error token.")

# engine messages that identify an error type on their own
EXEC_FAILURE_LABELS = (
    ("no such table", "table_mismatch"),
    ("no such column", "attribute_mismatch"),
    ("ambiguous column", "attribute_mismatch"),
    ("misuse of aggregate", "function_error"),
    ("no such function", "function_error"),
    ("wrong number of arguments", "function_error"),
    ("group by clause is required", "clause_error"),
    ("syntax error", "clause_error"),
)
PARSE_FAILURE_LABEL = "clause_error"


class InvalidOutput(ValueError):
    def __init__(self, raw: str):
        super().__init__(f"detector output violates the token grammar: {raw!r}")
        self.raw = raw


# --------------------------------------------------------------------------
# Static rules


def _unresolved_references(ast: SqlAst, schema: SchemaGraph) -> set[str]:
    labels = set()
    aliases = {unquote_identifier(n.attrs["alias"])[0].casefold()
               for n in ast.nodes if "alias" in n.attrs}
    for n in ast.nodes:
        if n.kind == "table_ref" and schema.table(n.attrs["name"]) is None:
            labels.add("table_mismatch")
    for q in (n for n in ast.nodes if n.kind == "query"):
        for n in ast.walk(q.id):
            if n.kind != "column_ref" or _nearest_query(ast, n.id) != q.id:
                continue
            name = n.attrs["name"]
            qual = n.attrs.get("table")
            if qual is not None:
                table = _bound_table(ast, n.id, qual)
                if table is None:
                    continue  # alias of a derived table or unknown binding: not assertable
                if schema.table(table) is not None and schema.column(table, name) is None:
                    labels.add("attribute_mismatch")
            else:
                if name.casefold() in aliases or _in_join_using(ast, n.id):
                    continue
                visible = _visible_tables(ast, q.id)
                if visible is None or not visible:
                    continue
                if not any(schema.column(t, name) for t in visible):
                    labels.add("attribute_mismatch")
    return labels


def _exec_failure_labels(message: str) -> set[str]:
    msg = message.lower()
    return {label for marker, label in EXEC_FAILURE_LABELS if marker in msg}


def static_detect(ast: Optional[SqlAst], qss: QuestionSchemaStructure, db: Optional[Database],
                  exec_feedback: Union[ExecOutcome, str, None] = None) -> frozenset:
    """Deterministic rule pass; never raises."""
    labels: set[str] = set()
    failed = False
    if isinstance(exec_feedback, ExecOutcome) and exec_feedback.status == "error":
        failed = True
        labels |= _exec_failure_labels(exec_feedback.error_message)
    elif isinstance(exec_feedback, str) and exec_feedback.startswith("ERROR"):
        failed = True
        labels |= _exec_failure_labels(exec_feedback)
    if ast is None:
        # SQL outside the parser's subset that the engine accepts is not an error
        if failed and not labels:
            labels.add(PARSE_FAILURE_LABEL)
        return frozenset(labels)
    schema = qss.resolution_schema
    checks = [
        lambda: _unresolved_references(ast, schema),
        lambda: {"value_error"} if db is not None and value_error_rule(ast, schema, db) else set(),
        lambda: {"table_redundancy"} if table_redundancy_rule(ast, schema) else set(),
    ]
    for check in checks:
        try:
            labels |= check()
        except Exception as exc:  # a broken rule must not block detection
            log.warning("static rule failed: %s", exc)
    return frozenset(labels)


# --------------------------------------------------------------------------
# Model input


@dataclass(frozen=True)
class DetectionInput:
    instructions: str
    question: str
    schema: str
    sql: str
    ast: str
    execution: str
    rule_results: Optional[str] = None

    def sections(self) -> list[tuple[str, str]]:
        out = [("Error Types", self.instructions), ("Question", self.question),
               ("Schema", self.schema), ("SQL", self.sql), ("AST", self.ast),
               ("Execution Result", self.execution)]
        if self.rule_results is not None:
            out.append(("Rule Detection", self.rule_results))
        return out

    @property
    def text(self) -> str:
        return format_sections(self.sections())


def feedback_text(exec_feedback: Union[ExecOutcome, str, None]) -> str:
    if exec_feedback is None:
        return "not executed"
    if isinstance(exec_feedback, str):
        return exec_feedback
    return exec_feedback.feedback(FEEDBACK_ROWS)


def rule_text(rule_set) -> str:
    if not rule_set:
        return "none"
    tax = load_taxonomy()
    return " ".join(tax.token_for(t.name) for t in tax.sort_by_priority(rule_set))


def build_detection_input(sample: Sample, qss: QuestionSchemaStructure, ast: Optional[SqlAst],
                          exec_feedback, rule_set=None) -> DetectionInput:
    if ast is None:
        try:
            parse_sql(sample.sql)
            tree = "unavailable"
        except ParseError as exc:
            tree = f"unavailable: {exc}"
    else:
        tree = render_tree(ast)
    return DetectionInput(load_taxonomy().instructions(), sample.question, serialize_mschema(qss),
                          sample.sql, tree, feedback_text(exec_feedback),
                          None if rule_set is None else rule_text(rule_set))


# --------------------------------------------------------------------------
# Model detection


_SPLIT = re.compile(r"[\s,]+")


def parse_token_sequence(raw: str) -> tuple[frozenset, list[str]]:
    """Map a raw detector answer onto labels; raises InvalidOutput on grammar violations."""
    tax = load_taxonomy()
    tokens = [t for t in _SPLIT.split(raw.strip()) if t]
    if not tokens:
        raise InvalidOutput(raw)
    labels = set()
    for tok in tokens:
        try:
            label = tax.label_for(tok)
        except (UnknownToken, ReservedToken):
            raise InvalidOutput(raw) from None
        if label is not None:
            labels.add(label.name)
    if NULL_TOKEN in tokens:
        labels = set()
    return frozenset(labels), tokens


def semantic_detect(detection_input: DetectionInput, backend,
                    retries: int = DEFAULT_RETRIES) -> tuple[frozenset, list[str]]:
    allowed = load_taxonomy().allowed_tokens()
    last = ""
    for _attempt in range(retries + 1):
        raw = backend.complete(DETECTOR_SYSTEM, detection_input.text, allowed_tokens=allowed)
        last = raw
        try:
            return parse_token_sequence(raw)
        except InvalidOutput:
            continue
    raise InvalidOutput(last)


# --------------------------------------------------------------------------
# Aggregation


def aggregate(rule_set, llm_set) -> frozenset:
    union = frozenset(rule_set) | frozenset(llm_set)
    union -= {NO_ERROR}
    return union if union else frozenset({NO_ERROR})


@dataclass(frozen=True)
class DetectionResult:
    rule_set: frozenset
    llm_set: frozenset
    final: frozenset
    raw_token_sequence: tuple[str, ...] = ()
    detection_input: Optional[DetectionInput] = field(default=None, compare=False, repr=False)

    @property
    def flagged(self) -> bool:
        return self.final != frozenset({NO_ERROR})

    def errors(self) -> list[str]:
        """Final labels in priority order (empty when nothing was flagged)."""
        if not self.flagged:
            return []
        return [t.name for t in load_taxonomy().sort_by_priority(self.final)]


def _sorted(labels) -> list[str]:
    tax = load_taxonomy()
    return [t.name for t in tax.sort_by_priority(l for l in labels if l != NO_ERROR)]


def detect(sample: Sample, qss: QuestionSchemaStructure, ast: Optional[SqlAst],
           db: Optional[Database], backend, retries: int = DEFAULT_RETRIES,
           exec_feedback=None) -> DetectionResult:
    """Static rules, then model detection on the rule-augmented input, then union."""
    if exec_feedback is None and db is not None:
        exec_feedback = execute(sample.sql, db)
    try:
        rule_set = static_detect(ast, qss, db, exec_feedback)
    except Exception as exc:  # the static stage never blocks the pipeline
        log.warning("static detection failed: %s", exc)
        rule_set = frozenset()
    det_input = build_detection_input(sample, qss, ast, exec_feedback, rule_set)
    llm_set, raw = (frozenset(), [])
    if backend is not None:
        llm_set, raw = semantic_detect(det_input, backend, retries)
    return DetectionResult(rule_set, llm_set, aggregate(rule_set, llm_set), tuple(raw), det_input)


def detection_record(sample: Sample, result: DetectionResult) -> dict:
    return {"question_id": sample.key, "rule_errors": _sorted(result.rule_set),
            "llm_errors": _sorted(result.llm_set),
            "final": _sorted(result.final) if result.flagged else [NO_ERROR],
            "flagged": result.flagged, "raw_tokens": list(result.raw_token_sequence)}
