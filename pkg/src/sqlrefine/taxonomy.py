"""Error taxonomy: types, tokens, guideline templates, priority, external mapping."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping, Optional

NULL_TOKEN = "[ERR]_∅"
NO_ERROR = "no_error"  # the label set marker for λ∅
MIN_SLOTS = 12
_TOKEN_RE = re.compile(r"^\[ERR\]_(\d+)$")


class UnknownToken(ValueError):
    pass


class ReservedToken(ValueError):
    def __init__(self, index: int):
        super().__init__(f"[ERR]_{index} is a reserved slot")
        self.index = index


class UnknownErrorType(KeyError):
    pass


@dataclass(frozen=True)
class ErrorType:
    id: int
    name: str
    display_name: str
    description: str
    example: str
    related_words: tuple[str, ...]
    has_static_rule: bool
    tier: str

    @property
    def token(self) -> str:
        return f"[ERR]_{self.id}"

    def __repr__(self) -> str:
        return f"ErrorType({self.name})"


@dataclass(frozen=True)
class GuidelineTemplate:
    error_type: str
    localization: tuple[tuple[str, str], ...]  # (slot, label)
    analysis: tuple[tuple[str, str], ...]
    authored: bool = True

    @property
    def slots(self) -> list[str]:
        return [s for s, _ in self.localization + self.analysis]

    def render(self, values: Optional[Mapping[str, str]] = None) -> str:
        """Render the template; unfilled slots show as ``{slot}``."""
        values = values or {}
        lines = [f"[Error Type] {self.error_type.replace('_', ' ').title()}", "[Localization]"]
        lines += [f"{label}: {values.get(slot, '{' + slot + '}')}" for slot, label in self.localization]
        lines.append("[Analysis]")
        lines += [f"{label}: {values.get(slot, '{' + slot + '}')}" for slot, label in self.analysis]
        return "\n".join(lines)

    def check_filled(self, values: Mapping[str, str]) -> list[str]:
        """Slots missing from ``values``."""
        return [s for s in self.slots if s not in values]


@dataclass(frozen=True)
class ExternalCategory:
    category: str
    subcategory: str
    token: Optional[str]
    error_type: Optional[str]


class Taxonomy:
    """The error taxonomy loaded from its JSON resource."""

    def __init__(self, doc: dict):
        self.doc = doc
        self.reserved_slots = int(doc["reserved_slots"])
        if self.reserved_slots < MIN_SLOTS:
            raise ValueError(f"N must be at least {MIN_SLOTS}")
        self.types = tuple(ErrorType(t["id"], t["name"], t["display_name"], t["description"],
                                     t["example"], tuple(t["related_words"]), t["has_static_rule"],
                                     t["tier"]) for t in doc["types"])
        ids = sorted(t.id for t in self.types)
        if ids != list(range(1, len(ids) + 1)) or len(ids) > self.reserved_slots:
            raise ValueError("error type ids must be dense from 1")
        self.tiers = tuple(doc["tiers"])
        self._by_name = {t.name: t for t in self.types}
        self._by_id = {t.id: t for t in self.types}
        self.null_words = tuple(doc["null"]["related_words"])
        self.templates = {}
        for name, tpl in doc["templates"].items():
            loc = tuple((s["slot"], s["label"]) for s in tpl["localization"])
            ana = tuple((s["slot"], s["label"]) for s in tpl["analysis"])
            slots = [s for s, _ in loc + ana]
            if len(set(slots)) != len(slots):
                raise ValueError(f"duplicate slot in template {name}")
            self.templates[name] = GuidelineTemplate(name, loc, ana, tpl.get("authored", True))
        self.external = tuple(ExternalCategory(m["category"], m["subcategory"], m["token"], m["error_type"])
                              for m in doc["external_mapping"])
        order = sorted(self.types, key=lambda t: (self.tiers.index(t.tier), t.id))
        self._rank = {t.name: i for i, t in enumerate(order)}

    def __iter__(self):
        return iter(self.types)

    def __len__(self) -> int:
        return len(self.types)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.types]

    def get(self, label) -> ErrorType:
        if isinstance(label, ErrorType):
            return label
        if isinstance(label, int):
            found = self._by_id.get(label)
        elif isinstance(label, str) and _TOKEN_RE.match(label.strip()):
            found = self._by_id.get(int(_TOKEN_RE.match(label.strip()).group(1)))
        else:
            found = self._by_name.get(str(label).strip().lower().replace(" ", "_"))
        if found is None:
            raise UnknownErrorType(label)
        return found

    def token_for(self, label) -> str:
        if label is None:
            return NULL_TOKEN
        return self.get(label).token

    def label_for(self, surface: str) -> Optional[ErrorType]:
        surface = surface.strip()
        if surface == NULL_TOKEN:
            return None
        m = _TOKEN_RE.match(surface)
        if not m:
            raise UnknownToken(surface)
        idx = int(m.group(1))
        if idx in self._by_id:
            return self._by_id[idx]
        if len(self.types) < idx <= self.reserved_slots:
            raise ReservedToken(idx)
        raise UnknownToken(surface)

    def allowed_tokens(self) -> list[str]:
        """All surfaces the detector may emit: real types plus the null token."""
        return [t.token for t in self.types] + [NULL_TOKEN]

    def vocabulary(self) -> list[str]:
        """The full extended vocabulary including reserved slots."""
        return [f"[ERR]_{i}" for i in range(1, self.reserved_slots + 1)] + [NULL_TOKEN]

    def priority(self, label) -> int:
        return self._rank[self.get(label).name]

    def sort_by_priority(self, labels: Iterable) -> list[ErrorType]:
        return sorted((self.get(l) for l in labels), key=lambda t: self._rank[t.name])

    def template(self, label) -> GuidelineTemplate:
        return self.templates[self.get(label).name]

    def static_rule_types(self) -> list[ErrorType]:
        return [t for t in self.types if t.has_static_rule]

    def map_external(self, label) -> list[tuple[str, str]]:
        name = self.get(label).name
        return [(e.category, e.subcategory) for e in self.external if e.error_type == name]

    def uncovered_external(self) -> list[tuple[str, str]]:
        return [(e.category, e.subcategory) for e in self.external if e.error_type is None]

    def external_categories(self) -> list[str]:
        return list(dict.fromkeys(e.category for e in self.external))

    def categories_for(self, labels: Iterable) -> set[str]:
        """External top-level categories covered by a set of labels."""
        out = set()
        for l in labels:
            out.update(c for c, _ in self.map_external(l))
        return out

    def instructions(self) -> str:
        """The error-type definition block given to detection models."""
        lines = ["Error types (answer only with tokens):"]
        lines += [f"{t.token} {t.display_name}: {t.description}" for t in self.types]
        lines.append(f"{NULL_TOKEN} No Error: {self.doc['null']['description']}")
        return "\n".join(lines)

    def dumps(self) -> str:
        return json.dumps(self.doc, indent=2, ensure_ascii=False) + "\n"

    def export(self) -> dict:
        """Flat export used by ``taxonomy export``."""
        return {
            "reserved_slots": self.reserved_slots,
            "types": [{"token": t.token, "id": t.id, "name": t.name, "display_name": t.display_name,
                       "description": t.description, "related_words": list(t.related_words),
                       "has_static_rule": t.has_static_rule, "priority": self.priority(t)}
                      for t in self.types],
            "reserved": [f"[ERR]_{i}" for i in range(len(self.types) + 1, self.reserved_slots + 1)],
            "null": {"token": NULL_TOKEN, "display_name": self.doc["null"]["display_name"],
                     "related_words": list(self.null_words)},
            "templates": {n: {"localization": [s for s, _ in t.localization],
                              "analysis": [s for s, _ in t.analysis], "authored": t.authored}
                          for n, t in self.templates.items()},
            "external_mapping": [{"category": e.category, "subcategory": e.subcategory,
                                  "token": e.token, "error_type": e.error_type} for e in self.external],
        }


def resource_text(name: str) -> str:
    return resources.files("sqlrefine").joinpath("data", name).read_text(encoding="utf-8")


@lru_cache(maxsize=1)
def load_taxonomy() -> Taxonomy:
    return Taxonomy(json.loads(resource_text("taxonomy.json")))


# module-level conveniences over the default taxonomy

def token_for(label) -> str:
    return load_taxonomy().token_for(label)


def label_for(surface: str) -> Optional[ErrorType]:
    return load_taxonomy().label_for(surface)


def priority(label) -> int:
    return load_taxonomy().priority(label)


def map_external(label) -> list[tuple[str, str]]:
    return load_taxonomy().map_external(label)


def normalize_labels(labels: Iterable) -> frozenset[str]:
    """Canonical label set: taxonomy names; the empty set stands for no error."""
    tax = load_taxonomy()
    out = set()
    for l in labels:
        if l is None or l == NULL_TOKEN or l == NO_ERROR:
            continue
        out.add(tax.get(l).name)
    return frozenset(out)


def tokens_for(labels: Iterable) -> list[str]:
    """Token surfaces in id order; ``[ERR]_∅`` for the empty set."""
    names = normalize_labels(labels)
    if not names:
        return [NULL_TOKEN]
    tax = load_taxonomy()
    return [tax.get(n).token for n in sorted(names, key=lambda n: tax.get(n).id)]
