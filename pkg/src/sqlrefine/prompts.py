"""Section-delimited prompt layout shared by every model-facing stage."""

from __future__ import annotations

import re

_HEADER = re.compile(r"^### (.+?)\s*$", re.MULTILINE)


def format_sections(sections) -> str:
    """Join (name, body) pairs as ``### name`` blocks."""
    return "\n\n".join(f"### {name}\n{body}" for name, body in sections)


def parse_sections(text: str) -> dict[str, str]:
    """Inverse of :func:`format_sections`; later duplicates win."""
    out: dict[str, str] = {}
    matches = list(_HEADER.finditer(text))
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        out[m.group(1)] = text[m.end():end].strip("\n")
    return out


def extract_sql(text: str) -> str:
    """Pull SQL out of a model answer: a fenced block if present, else the text."""
    m = re.search(r"```(?:sql|sqlite)?\s*\n?(.*?)```", text, re.DOTALL | re.IGNORECASE)
    body = m.group(1) if m else text
    return body.strip().rstrip(";").strip()


# Localization answers: one block per error type, one ``slot: value`` line per slot.
#
#   [ERROR value_error]
#   nodes: 'Complete'
#   current_value: 'Complete'
#   [END]
#
# ``nodes`` holds SQL text spans separated by `` | ``.

_BLOCK = re.compile(r"^\[ERROR\s+([A-Za-z_ ]+?)\]\s*$(.*?)^\[END\]\s*$", re.MULTILINE | re.DOTALL)
SPAN_SEPARATOR = " | "


def format_localization_block(error_type: str, values) -> str:
    lines = [f"[ERROR {error_type}]"]
    lines += [f"{k}: {' '.join(str(v).split())}" for k, v in values.items()]
    lines.append("[END]")
    return "\n".join(lines)


def parse_localization_blocks(text: str) -> list[tuple[str, dict[str, str]]]:
    """All ``[ERROR ...]`` blocks in ``text`` as (error type, slot values)."""
    out = []
    for m in _BLOCK.finditer(text):
        values = {}
        for line in m.group(2).splitlines():
            key, sep, value = line.partition(":")
            if sep and key.strip():
                values[key.strip()] = value.strip()
        out.append((m.group(1).strip(), values))
    return out
