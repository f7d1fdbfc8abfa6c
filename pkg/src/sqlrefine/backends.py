"""Chat-completion backends: an HTTP client and deterministic mocks.

This is the only module that talks to the network.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Mapping, Optional

import httpx

from .prompts import SPAN_SEPARATOR, format_localization_block, parse_sections
from .sqlast import tokenize
from .taxonomy import load_taxonomy, normalize_labels, tokens_for

log = logging.getLogger(__name__)

ROLES = ("detector", "localizer", "refiner", "assistant")
MOCK_ROLES = ("oracle_detector", "oracle_localizer", "oracle_refiner", "oracle_assistant",
              "fixed_responder", "failing")
BACKOFF_BASE = 0.5
BACKOFF_CAP = 30.0


class BackendError(Exception):
    pass


class AuthError(BackendError):
    pass


class RateLimited(BackendError):
    def __init__(self, after: Optional[float]):
        super().__init__(f"rate limited (retry after {after}s)")
        self.after = after


class Timeout(BackendError):
    pass


class ProtocolError(BackendError):
    pass


class MissingGold(KeyError):
    def __init__(self, sample):
        super().__init__(f"no gold answer for sample {sample!r}")
        self.sample = sample


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    base_url: str
    model_name: str
    api_key_env: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 3
    constrained_decoding: bool = False
    temperature: float = 0.0
    max_output_tokens: int = 1024
    max_in_flight: int = 4

    def __post_init__(self):
        if not self.timeout > 0:
            raise ConfigError("timeout must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackendConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"mock"}
        if unknown:
            raise ConfigError(f"unknown backend fields: {', '.join(sorted(unknown))}")
        for req in ("base_url", "model_name"):
            if req not in d:
                raise ConfigError(f"backend config needs {req}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def api_key(self) -> Optional[str]:
        if not self.api_key_env:
            return None
        key = os.environ.get(self.api_key_env)
        if key is None:
            raise AuthError(f"environment variable {self.api_key_env} is not set")
        return key


class Backend:
    """Anything with ``complete(system_prompt, user_content, allowed_tokens=None)``."""

    constrained_decoding = False

    def complete(self, system_prompt: str, user_content: str,
                 allowed_tokens: Optional[list[str]] = None) -> str:
        raise NotImplementedError


def token_sequence_regex(allowed_tokens: Iterable[str]) -> str:
    """Regex accepting one or more allowed tokens separated by single spaces."""
    alt = "|".join(re.escape(t) for t in allowed_tokens)
    return f"({alt})( ({alt}))*"


class HttpBackend(Backend):
    """OpenAI-compatible ``/chat/completions`` client with retry and backoff."""

    def __init__(self, config: BackendConfig, transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.constrained_decoding = config.constrained_decoding
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._client = httpx.Client(base_url=config.base_url.rstrip("/"),
                                    timeout=config.timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _payload(self, system_prompt, user_content, allowed_tokens) -> dict:
        body = {
            "model": self.config.model_name,
            "messages": [{"role": "system", "content": system_prompt},
                         {"role": "user", "content": user_content}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        }
        if allowed_tokens and self.constrained_decoding:
            body["guided_regex"] = token_sequence_regex(allowed_tokens)
        return body

    def complete(self, system_prompt, user_content, allowed_tokens=None) -> str:
        headers = {}
        key = self.config.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = self._payload(system_prompt, user_content, allowed_tokens)
        attempts = self.config.max_retries + 1
        last: BackendError = ProtocolError("no attempt made")
        for attempt in range(attempts):
            if attempt:
                delay = min(BACKOFF_CAP, BACKOFF_BASE * 2 ** (attempt - 1))
                if isinstance(last, RateLimited) and last.after:
                    delay = max(delay, last.after)
                self._sleep(delay)
            try:
                with self._slots:
                    resp = self._client.post("/chat/completions", json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last = Timeout(str(exc) or "request timed out")
                continue
            except httpx.TransportError as exc:
                last = ProtocolError(f"transport failure: {exc}")
                continue
            status = resp.status_code
            if status in (401, 403):
                raise AuthError(f"HTTP {status}: {resp.text[:200]}")
            if status == 429:
                last = RateLimited(_retry_after(resp))
                continue
            if status >= 500:
                last = ProtocolError(f"HTTP {status}")
                continue
            if status >= 400:
                raise ProtocolError(f"HTTP {status}: {resp.text[:200]}")
            return _message_text(resp)
        raise last


def _retry_after(resp: httpx.Response) -> Optional[float]:
    try:
        return float(resp.headers["retry-after"])
    except (KeyError, ValueError):
        return None


def _message_text(resp: httpx.Response) -> str:
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"unexpected response shape: {exc}") from exc
    if not isinstance(content, str):
        raise ProtocolError("message content is not text")
    return content


# --------------------------------------------------------------------------
# Mocks


def fingerprint(system_prompt: str, user_content: str, allowed_tokens=None) -> str:
    raw = json.dumps([system_prompt, user_content, list(allowed_tokens or ())])
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


@dataclass
class MockBackend(Backend):
    """Scripted backend. ``responder`` maps a request to its answer."""

    role: str
    responder: Callable[[str, str, Optional[list]], str]
    constrained_decoding: bool = False
    calls: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.role not in MOCK_ROLES:
            raise ConfigError(f"unknown mock role {self.role!r}")
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def complete(self, system_prompt, user_content, allowed_tokens=None) -> str:
        with self._lock:
            self.calls.append(fingerprint(system_prompt, user_content, allowed_tokens))
        return self.responder(system_prompt, user_content, allowed_tokens)


def fixed_responder(response: str = "", table: Optional[Mapping[str, str]] = None) -> MockBackend:
    """Answer from ``table`` (keyed by request fingerprint or question) or with ``response``."""
    table = dict(table or {})

    def respond(system, user, allowed):
        fp = fingerprint(system, user, allowed)
        if fp in table:
            return table[fp]
        question = parse_sections(user).get("Question")
        return table.get(question, response)

    return MockBackend("fixed_responder", respond)


def failing(attempts: int = 1) -> MockBackend:
    """A backend that times out on every call (``attempts`` calls per request)."""
    def respond(system, user, allowed):
        raise Timeout(f"mock timeout after {attempts} attempt(s)")

    backend = MockBackend("failing", respond)
    backend.attempts = attempts
    return backend


def _norm_sql(sql: str) -> str:
    return " ".join(sql.split()).rstrip(";").strip()


@dataclass(frozen=True)
class OracleFixture:
    question: str
    sql: str
    gold_sql: str
    labels: frozenset
    mutation_log: tuple = ()
    sample_id: str = ""


def _fixture(item) -> OracleFixture:
    get = item.get if isinstance(item, Mapping) else (lambda k, d=None: getattr(item, k, d))
    key = get("sample_id") or get("question_id") or get("question")
    gold = get("gold_sql")
    if not gold:
        raise MissingGold(key)
    sql = get("sql") or get("predicted_sql") or gold
    labels = get("labels") or (get("annotation") or {}).get("labels", ())
    log_ = []
    for m in get("mutation_log") or ():
        if isinstance(m, Mapping):
            log_.append((m.get("node_id"), m.get("before", ""), m.get("after", ""), m.get("label", "")))
        else:
            log_.append(tuple(m) + ("",) * (4 - len(m)))
    return OracleFixture(get("question"), sql, gold, normalize_labels(labels), tuple(log_), str(key))


class OracleIndex:
    """Fixtures keyed by (question, SQL) as they appear in prompt sections."""

    def __init__(self, fixtures):
        self.by_key: dict[tuple[str, str], OracleFixture] = {}
        for item in fixtures:
            fx = _fixture(item)
            self.by_key[(fx.question.strip(), _norm_sql(fx.sql))] = fx

    def lookup(self, user_content: str) -> OracleFixture:
        sections = parse_sections(user_content)
        question = sections.get("Question", "").strip()
        sql = _norm_sql(sections.get("SQL", ""))
        fx = self.by_key.get((question, sql))
        if fx is None:
            raise MissingGold(question or user_content[:60])
        return fx


def _token_texts(sql: str) -> list[str]:
    return [t.text for t in tokenize(sql)]


def diff_spans(sql: str, gold_sql: str) -> list[tuple[str, str]]:
    """(text in ``sql``, text in ``gold_sql``) for each differing token run."""
    a, b = _token_texts(sql), _token_texts(gold_sql)
    out = []
    sm = difflib.SequenceMatcher(a=a, b=b, autojunk=False)
    for op, i1, i2, j1, j2 in sm.get_opcodes():
        if op != "equal":
            out.append((" ".join(a[i1:i2]), " ".join(b[j1:j2])))
    return out


_CLAUSE_WORDS = (("GROUP BY", "GROUP BY"), ("ORDER BY", "ORDER BY"), ("HAVING", "HAVING"),
                 ("WHERE", "WHERE"), ("JOIN", "FROM"), ("FROM", "FROM"), ("LIMIT", "LIMIT"))


def _clause_of(text: str, sql: str) -> str:
    up = text.upper()
    for word, clause in _CLAUSE_WORDS:
        if up.startswith(word):
            return clause
    # otherwise the nearest clause keyword before the span in the SQL
    pos = sql.upper().find(up) if up else -1
    head = sql.upper()[:pos] if pos >= 0 else ""
    best, where = "SELECT", -1
    for word, clause in _CLAUSE_WORDS:
        i = head.rfind(word)
        if i > where:
            best, where = clause, i
    return best


def _unquote(text: str) -> str:
    if len(text) >= 2 and text[0] == text[-1] == "'":
        return text[1:-1].replace("''", "'")
    return text


def oracle_localization(fx: OracleFixture, label: str) -> dict[str, str]:
    """Guideline slot values for one label, read off the mutation log or a gold diff."""
    pairs = [(after, before) for _, before, after, lab in fx.mutation_log if lab == label]
    if not pairs:
        pairs = diff_spans(fx.sql, fx.gold_sql)
    wrong = [w for w, _ in pairs if w]
    right = [r for _, r in pairs if r]
    anchor = wrong[0] if wrong else (right[0] if right else "")
    values = {"nodes": SPAN_SEPARATOR.join(wrong) or "none",
              "clause": _clause_of(anchor, fx.sql if wrong else fx.gold_sql)}
    if label == "value_error":
        values.update(current_value=", ".join(_unquote(w) for w in wrong),
                      correct_value_from_nl=", ".join(_unquote(r) for r in right),
                      data_type="text" if any(r.startswith("'") for r in right) else "number",
                      format_issue="value does not occur in the column")
        return values
    tpl = load_taxonomy().template(label)
    for slot, _ in tpl.localization:
        values.setdefault(slot, ", ".join(wrong) or "none")
    for i, (slot, _) in enumerate(tpl.analysis):
        values[slot] = (", ".join(right) or "remove it") if i == 0 else "see question"
    return values


def make_oracle(fixtures) -> tuple[MockBackend, MockBackend, MockBackend]:
    """Detector, localizer and refiner mocks that answer from gold fixtures."""
    index = OracleIndex(fixtures)

    def detect(system, user, allowed):
        return " ".join(tokens_for(index.lookup(user).labels))

    def localize(system, user, allowed):
        fx = index.lookup(user)
        wanted = [l.strip() for l in parse_sections(user).get("Detected Errors", "").split(",")
                  if l.strip()]
        blocks = [format_localization_block(l, oracle_localization(fx, l)) for l in wanted]
        return "\n\n".join(blocks)

    def refine(system, user, allowed):
        return f"```sql\n{index.lookup(user).gold_sql}\n```"

    return (MockBackend("oracle_detector", detect), MockBackend("oracle_localizer", localize),
            MockBackend("oracle_refiner", refine))


def make_assistant_oracle(fixtures) -> MockBackend:
    """Injection assistant mock: names the fixture's labels and returns its gold SQL."""
    index = OracleIndex(fixtures)

    def respond(system, user, allowed):
        fx = index.lookup(user)
        return json.dumps({"labels": sorted(fx.labels), "sql": fx.gold_sql})

    return MockBackend("oracle_assistant", respond)


def build_backend(section: Mapping, fixtures=None) -> Backend:
    """Backend from a config section; ``mock`` selects a scripted backend."""
    mock = section.get("mock")
    if mock is None:
        return HttpBackend(BackendConfig.from_dict(section))
    kind = mock if isinstance(mock, str) else mock.get("role")
    opts = {} if isinstance(mock, str) else mock
    if kind == "fixed_responder":
        return fixed_responder(opts.get("response", ""), opts.get("table"))
    if kind == "failing":
        return failing()
    if kind in ("oracle_detector", "oracle_localizer", "oracle_refiner"):
        if fixtures is None:
            raise ConfigError(f"{kind} needs gold fixtures")
        det, loc, ref = make_oracle(fixtures)
        return {"oracle_detector": det, "oracle_localizer": loc, "oracle_refiner": ref}[kind]
    if kind == "oracle_assistant":
        if fixtures is None:
            raise ConfigError("oracle_assistant needs gold fixtures")
        return make_assistant_oracle(fixtures)
    raise ConfigError(f"unknown mock role {kind!r}")
