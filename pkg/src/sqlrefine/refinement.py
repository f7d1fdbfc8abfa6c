"""Error localization, context extraction, and single-pass refinement."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .backends import BackendError
from .detection import DetectionInput, DetectionResult, detect, detection_record
from .execution import Database, execute
from .prompts import SPAN_SEPARATOR, extract_sql, format_sections, parse_localization_blocks
from .records import Sample
from .schema import (QuestionSchemaStructure, SchemaGraph, literal_column, resolve_column,
                     serialize_mschema, subgraph)
from .sqlast import (AstFragment, ParseError, SqlAst, minimal_enclosing_subtree, parse_sql,
                     tokenize)
from .taxonomy import NO_ERROR, ErrorType, GuidelineTemplate, load_taxonomy, resource_text

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 2
DEFAULT_EXAMPLES = 2

LOCALIZER_SYSTEM = ("You locate errors in SQL queries. For every listed error type answer with "
                    "one [ERROR type] ... [END] block filling each guideline slot as 'slot: value'. "
                    "The nodes slot lists the erroneous SQL fragments separated by ' | '.")
REFINER_SYSTEM = ("You fix SQL queries. Apply every listed correction in order and answer with "
                  "the corrected SQL only, in a ```sql block.")

# clause keywords a localizer may name, and the AST node kinds they denote
CLAUSE_NAMES = {
    "SELECT": "select_clause", "FROM": "from_item", "JOIN": "from_item",
    "WHERE": "where_clause", "GROUP BY": "group_by", "HAVING": "having",
    "ORDER BY": "order_by", "LIMIT": "limit",
}

# How far the AST context reaches per error type.  Errors about what is
# absent from the query need the whole query around them; the rest stay
# inside the clause holding the faulty nodes.
QUERY_SCOPE = frozenset({"table_missing", "attribute_missing", "condition_missing",
                         "clause_error", "table_mismatch"})


class MalformedLocalization(ValueError):
    def __init__(self, raw: str, reason: str):
        super().__init__(f"{reason}: {raw[:200]!r}")
        self.raw = raw


class RefinementFailed(RuntimeError):
    def __init__(self, original_sql: str, reason: str):
        super().__init__(reason)
        self.original_sql = original_sql


@dataclass(frozen=True)
class Localization:
    error_type: ErrorType
    error_nodes: frozenset
    schema_elements: frozenset
    filled_guideline: dict
    warnings: tuple[str, ...] = ()

    @property
    def template(self) -> GuidelineTemplate:
        return load_taxonomy().template(self.error_type)

    def guideline_text(self) -> str:
        return self.template.render(self.filled_guideline)

    def to_dict(self) -> dict:
        return {"error_type": self.error_type.name, "error_nodes": sorted(self.error_nodes),
                "schema_elements": sorted(self.schema_elements),
                "guideline": dict(self.filled_guideline), "warnings": list(self.warnings)}


# --------------------------------------------------------------------------
# Few-shot store


@dataclass(frozen=True)
class Demonstration:
    error_type: str
    db_id: str
    question: str
    wrong_sql: str
    fixed_sql: str
    rationale: str

    def text(self) -> str:
        return (f"Question: {self.question}\nWrong: {self.wrong_sql}\n"
                f"Fixed: {self.fixed_sql}\nWhy: {self.rationale}")


class ExampleStore:
    def __init__(self, demos: Sequence[Demonstration] = ()):
        self._by_type: dict[str, list[Demonstration]] = {}
        for d in demos:
            self._by_type.setdefault(d.error_type, []).append(d)

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_type.values())

    def all(self) -> list[Demonstration]:
        return [d for v in self._by_type.values() for d in v]

    def retrieve(self, error_type, k: int = DEFAULT_EXAMPLES) -> list[Demonstration]:
        name = error_type.name if isinstance(error_type, ErrorType) else error_type
        return self._by_type.get(name, [])[:k]

    @classmethod
    def from_json(cls, doc: dict) -> "ExampleStore":
        demos = []
        for name, items in doc.items():
            for it in items:
                demos.append(Demonstration(name, it["db_id"], it["question"], it["wrong_sql"],
                                           it["fixed_sql"], it["rationale"]))
        return cls(demos)

    @classmethod
    def default(cls) -> "ExampleStore":
        return cls.from_json(json.loads(resource_text("examples.json")))


# --------------------------------------------------------------------------
# Localization


def _token_key(text: str) -> tuple[str, ...]:
    try:
        return tuple(t.text for t in tokenize(text))
    except ParseError:
        return tuple(text.split())


def resolve_span(ast: SqlAst, span_text: str) -> list[int]:
    """AST nodes a text span denotes: exact token span first, then a unique substring."""
    key = _token_key(span_text)
    if not key:
        return []
    src = ast.source_tokens
    n = len(key)
    hits = []
    for start in range(len(src) - n + 1):
        if tuple(src[start:start + n]) == key:
            end = start + n - 1
            # deepest node with exactly this span
            exact = [nd for nd in ast.nodes if nd.span == (start, end)]
            if exact:
                hits.append(exact[-1].id)
    if hits:
        return hits
    needle = " ".join(key).casefold()
    containing = [nd for nd in ast.nodes if needle in ast.text(nd.id).casefold()]
    if not containing:
        return []
    smallest = min(nd.span[1] - nd.span[0] for nd in containing)
    best = [nd.id for nd in containing if nd.span[1] - nd.span[0] == smallest]
    return best if len(best) == 1 else []


def _clause_node(ast: SqlAst, clause: str) -> Optional[int]:
    kind = CLAUSE_NAMES.get(" ".join(clause.upper().split()))
    if kind is None:
        return None
    return next((n.id for n in ast.nodes if n.kind == kind), None)


def _schema_elements(ast: Optional[SqlAst], nodes, schema: SchemaGraph, values: dict) -> set[str]:
    out = set()
    if ast is not None:
        for nid in nodes:
            for n in ast.walk(nid):
                if n.kind == "table_ref" and schema.table(n.attrs["name"]) is not None:
                    out.add(schema.table(n.attrs["name"]).name)
                elif n.kind == "column_ref":
                    col = resolve_column(ast, n.id, schema)
                    if col is not None:
                        out.add(col.qualified)
                elif n.kind == "literal":
                    col = literal_column(ast, n.id, schema, ops=("=", "==", "!=", "<>", "<", ">",
                                                                  "<=", ">=", "IN", "LIKE"))
                    if col is not None:
                        out.add(col.qualified)
    # names the localizer mentions in its slot values
    for slot, value in values.items():
        if slot == "nodes":
            continue
        toks = _token_key(value)
        for i, tok in enumerate(toks):
            t = schema.table(tok.strip('"`[]'))
            if t is None:
                continue
            if i + 2 < len(toks) and toks[i + 1] == "." and schema.column(t.name, toks[i + 2]):
                out.add(schema.column(t.name, toks[i + 2]).qualified)
            else:
                out.add(t.name)
    return out


def localization_prompt(detection_input: DetectionInput, labels: Sequence[ErrorType]) -> str:
    sections = [s for s in detection_input.sections() if s[0] != "Error Types"]
    sections.append(("Detected Errors", ", ".join(t.name for t in labels)))
    sections.append(("Guidelines", "\n\n".join(load_taxonomy().template(t).render() for t in labels)))
    return format_sections(sections)


def localize(detection_input: DetectionInput, final_labels, backend, ast: Optional[SqlAst],
             schema: SchemaGraph, retries: int = DEFAULT_RETRIES) -> list[Localization]:
    """One Localization per detected label, from a single structured backend answer."""
    if backend is None:
        raise BackendError("no localizer backend configured")
    tax = load_taxonomy()
    names = set(final_labels) - {NO_ERROR}
    if not names:
        raise ValueError("nothing to localize: detection found no error")
    labels = tax.sort_by_priority(names)
    prompt = localization_prompt(detection_input, labels)
    raw = ""
    blocks: dict[str, dict] = {}
    for _attempt in range(retries + 1):
        raw = backend.complete(LOCALIZER_SYSTEM, prompt)
        blocks = {}
        for name, values in parse_localization_blocks(raw):
            try:
                blocks[tax.get(name).name] = values
            except KeyError:
                continue
        if all(t.name in blocks for t in labels):
            break
    else:
        missing = [t.name for t in labels if t.name not in blocks]
        raise MalformedLocalization(raw, f"no block for {', '.join(missing)}")
    return [_build_localization(t, blocks[t.name], ast, schema) for t in labels]


def _build_localization(etype: ErrorType, values: dict, ast: Optional[SqlAst],
                        schema: SchemaGraph) -> Localization:
    warnings = []
    nodes: set[int] = set()
    spans = [s.strip() for s in values.get("nodes", "").split(SPAN_SEPARATOR.strip())]
    spans = [s for s in spans if s and s.lower() != "none"]
    unresolved = []
    if ast is not None:
        for span in spans:
            found = resolve_span(ast, span)
            if found:
                nodes.update(found)
            else:
                unresolved.append(span)
    elif spans:
        unresolved = spans
    if unresolved or (ast is not None and not nodes):
        clause = _clause_node(ast, values.get("clause", "")) if ast is not None else None
        if unresolved:
            warnings.append(f"could not resolve {', '.join(map(repr, unresolved))}; "
                            f"localized to the {'clause' if clause is not None else 'statement'}")
        if clause is not None and not nodes:
            nodes.add(clause)
    elements = _schema_elements(ast, nodes, schema, values)
    tpl = load_taxonomy().template(etype)
    filled = {}
    for slot in tpl.slots:
        if values.get(slot):
            filled[slot] = values[slot]
        else:
            filled[slot] = "unknown"
            warnings.append(f"slot {slot} left empty by the localizer")
    return Localization(etype, frozenset(nodes), frozenset(elements), filled, tuple(warnings))


# --------------------------------------------------------------------------
# Context


@dataclass(frozen=True)
class ContextEntry:
    error_type: ErrorType
    subtree: Optional[AstFragment]
    subgraph: QuestionSchemaStructure
    guideline: str
    examples: tuple[Demonstration, ...]
    priority: int

    def subtree_text(self, original_sql: str) -> str:
        if self.subtree is None or self.subtree.is_empty:
            return original_sql
        return self.subtree.text()

    def sections(self, index: int, original_sql: str) -> list[tuple[str, str]]:
        head = f"Error {index}: {self.error_type.display_name}"
        body = [f"Fragment: {self.subtree_text(original_sql)}", "", self.guideline, "",
                serialize_mschema(self.subgraph)]
        if self.examples:
            body += ["", "Examples:"] + [d.text() for d in self.examples]
        return [(head, "\n".join(body))]


def extract_context(ast: Optional[SqlAst], qss: QuestionSchemaStructure, loc: Localization,
                    store: ExampleStore, k: int = DEFAULT_EXAMPLES) -> ContextEntry:
    tax = load_taxonomy()
    if ast is None:
        frag = None
    elif not loc.error_nodes:
        frag = AstFragment(ast, ast.root)  # degenerate: the whole statement
    else:
        frag = minimal_enclosing_subtree(ast, loc.error_nodes)
        if loc.error_type.name in QUERY_SCOPE:
            q = next((a.id for a in ast.ancestors(frag.root) if a.kind in ("query", "compound")),
                     None)
            if q is not None:
                frag = AstFragment(ast, q, frag.targets)
    graph = subgraph(qss, loc.schema_elements)
    return ContextEntry(loc.error_type, frag, graph, loc.guideline_text(),
                        tuple(store.retrieve(loc.error_type, k)), tax.priority(loc.error_type))


def order_context(entries) -> list[ContextEntry]:
    return sorted(entries, key=lambda e: (e.priority, e.error_type.id))


def refinement_prompt(question: str, original_sql: str, context: Sequence[ContextEntry]) -> str:
    sections = [("Question", question), ("SQL", original_sql)]
    for i, entry in enumerate(context, 1):
        sections += entry.sections(i, original_sql)
    return format_sections(sections)


def refine(original_sql: str, context: Sequence[ContextEntry], backend, question: str = "",
           retries: int = DEFAULT_RETRIES) -> str:
    """Corrected SQL from one backend call covering every error in priority order."""
    if backend is None:
        raise BackendError("no refiner backend configured")
    prio = [e.priority for e in context]
    if prio != sorted(prio):
        raise ValueError("context entries must be in priority order")
    prompt = refinement_prompt(question, original_sql, context)
    for _attempt in range(retries + 1):
        answer = backend.complete(REFINER_SYSTEM, prompt)
        sql = extract_sql(answer)
        try:
            parse_sql(sql)
        except ParseError:
            continue
        return sql
    raise RefinementFailed(original_sql, "refiner answer did not parse as SQL")


# --------------------------------------------------------------------------
# Pipeline


@dataclass
class PipelineResult:
    sample: Sample
    original: str
    detection: Optional[DetectionResult]
    localizations: list = field(default_factory=list)
    refined: str = ""
    status: str = "passthrough"
    errors: list = field(default_factory=list)

    @property
    def final_labels(self) -> list[str]:
        if self.detection is None or not self.detection.flagged:
            return [NO_ERROR]
        return self.detection.errors()

    def record(self) -> dict:
        return {"question_id": self.sample.key, "original_sql": self.original,
                "final_labels": self.final_labels,
                "localizations": [l.to_dict() for l in self.localizations],
                "refined_sql": self.refined, "status": self.status, "errors": list(self.errors)}

    def detection_record(self) -> dict:
        if self.detection is None:
            return {"question_id": self.sample.key, "final": [NO_ERROR], "flagged": False,
                    "rule_errors": [], "llm_errors": [], "raw_tokens": [],
                    "errors": list(self.errors)}
        return detection_record(self.sample, self.detection)


def run_pipeline(sample: Sample, db: Optional[Database], qss: QuestionSchemaStructure,
                 detector_backend, loc_backend, ref_backend,
                 store: Optional[ExampleStore] = None, retries: int = DEFAULT_RETRIES,
                 k: int = DEFAULT_EXAMPLES) -> PipelineResult:
    """Detect, localize and refine one sample; stage failures are recorded, not raised."""
    store = store if store is not None else ExampleStore.default()
    original = sample.sql
    result = PipelineResult(sample, original, None, refined=original)
    try:
        ast: Optional[SqlAst] = parse_sql(original)
    except ParseError as exc:
        ast = None
        result.errors.append(f"parse: {exc}")
    feedback = execute(original, db) if db is not None else None
    try:
        det = detect(sample, qss, ast, db, detector_backend, retries, exec_feedback=feedback)
    except Exception as exc:  # a broken detector leaves the rule verdict only
        result.errors.append(f"detection: {type(exc).__name__}: {exc}")
        try:
            det = detect(sample, qss, ast, db, None, retries, exec_feedback=feedback)
        except Exception as exc2:
            result.errors.append(f"static detection: {exc2}")
            result.status = "detection_failed"
            return result
    result.detection = det
    if not det.flagged:
        return result
    schema = qss.resolution_schema
    try:
        locs = localize(det.detection_input, det.final, loc_backend, ast, schema, retries)
    except (MalformedLocalization, BackendError) as exc:
        result.errors.append(f"localization: {type(exc).__name__}: {exc}")
        tax = load_taxonomy()
        locs = [_build_localization(t, {}, ast, schema) for t in tax.sort_by_priority(det.final)]
    result.localizations = locs
    try:
        context = order_context(extract_context(ast, qss, l, store, k) for l in locs)
        result.refined = refine(original, context, ref_backend, sample.question, retries)
        result.status = "refined"
    except RefinementFailed as exc:
        result.errors.append(f"refinement: {exc}")
        result.status = "refinement_failed"
        result.refined = original
    except BackendError as exc:
        result.errors.append(f"refinement: {type(exc).__name__}: {exc}")
        result.status = "refinement_failed"
        result.refined = original
    return result
