"""SQLite-subset parser producing an immutable AST with token-span alignment.

Every node carries an inclusive ``(start, end)`` span over ``source_tokens``,
so a node found by any analysis can be mapped back to the exact tokens of the
query text it came from.  ``flatten_ast`` renders a tree (possibly edited via
:meth:`SqlAst.to_tree`) back to SQL.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, NamedTuple, Optional

SUPPORTED_DIALECTS = ("sqlite",)

NODE_KINDS = (
    "query", "compound", "select_clause", "from_item", "join", "where_clause",
    "group_by", "having", "order_by", "limit", "predicate", "comparison",
    "logical_op", "binary_op", "unary_op", "function_call", "column_ref",
    "table_ref", "literal", "modifier", "subquery", "star", "expr_list",
)

CLAUSE_KINDS = frozenset({
    "select_clause", "from_item", "where_clause", "group_by", "having",
    "order_by", "limit",
})

KEYWORDS = frozenset("""
    ALL AND AS ASC BETWEEN BY CASE CAST COLLATE CROSS DESC DISTINCT ELSE END
    ESCAPE EXCEPT EXISTS FALSE FROM FULL GLOB GROUP HAVING IN INNER INTERSECT
    IS ISNULL JOIN LEFT LIKE LIMIT NATURAL NOT NOTNULL NULL OFFSET ON OR ORDER
    OUTER OVER RIGHT SELECT THEN TRUE UNION USING WHEN WHERE
""".split())

_OPERATORS = ("<=", ">=", "<>", "!=", "==", "||", "<<", ">>",
              "=", "<", ">", "+", "-", "*", "/", "%", "(", ")", ",", ".", ";", "~", "&", "|")

_NUMBER_RE = re.compile(r"0[xX][0-9A-Fa-f]+|(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")

COMPARISON_OPS = ("=", "==", "!=", "<>", "<", "<=", ">", ">=")
_ARITH_PRECEDENCE = {"||": 5, "*": 4, "/": 4, "%": 4, "+": 3, "-": 3,
                     "<<": 2, ">>": 2, "&": 2, "|": 2}


class ParseError(ValueError):
    """Syntax error at ``position`` (an index into the token stream)."""

    def __init__(self, position: int, message: str):
        super().__init__(f"token {position}: {message}")
        self.position = position
        self.message = message


class UnsupportedDialect(ValueError):
    pass


class UnknownNode(KeyError):
    pass


class Token(NamedTuple):
    kind: str  # keyword, ident, qident, string, number, op
    text: str
    offset: int  # character offset in the original text


def tokenize(text: str) -> list[Token]:
    """Lex ``text``; comments are dropped and a single trailing ``;`` is stripped."""
    tokens: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if text.startswith("--", i):
            j = text.find("\n", i)
            i = n if j < 0 else j + 1
            continue
        if text.startswith("/*", i):
            j = text.find("*/", i + 2)
            if j < 0:
                raise ParseError(len(tokens), "unterminated comment")
            i = j + 2
            continue
        if ch == "'":
            j = i + 1
            while True:
                j = text.find("'", j)
                if j < 0:
                    raise ParseError(len(tokens), "unterminated string literal")
                if text.startswith("''", j):
                    j += 2
                    continue
                break
            tokens.append(Token("string", text[i:j + 1], i))
            i = j + 1
            continue
        if ch in "\"`[":
            close = {"\"": "\"", "`": "`", "[": "]"}[ch]
            j = i + 1
            while True:
                j = text.find(close, j)
                if j < 0:
                    raise ParseError(len(tokens), "unterminated quoted identifier")
                if close != "]" and text.startswith(close * 2, j):
                    j += 2
                    continue
                break
            tokens.append(Token("qident", text[i:j + 1], i))
            i = j + 1
            continue
        m = _NUMBER_RE.match(text, i)
        if m and (ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit())):
            tokens.append(Token("number", m.group(), i))
            i = m.end()
            continue
        if ch.isalpha() or ch == "_":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] in "_$"):
                j += 1
            word = text[i:j]
            kind = "keyword" if word.upper() in KEYWORDS else "ident"
            tokens.append(Token(kind, word, i))
            i = j
            continue
        for op in _OPERATORS:
            if text.startswith(op, i):
                tokens.append(Token("op", op, i))
                i += len(op)
                break
        else:
            raise ParseError(len(tokens), f"unexpected character {ch!r}")
    if tokens and tokens[-1].text == ";":
        tokens.pop()
    return tokens


def unquote_identifier(raw: str) -> tuple[str, str]:
    """Return ``(name, quote_char)``; quote_char is '' for bare identifiers."""
    if raw and raw[0] in "\"`[":
        q = raw[0]
        inner = raw[1:-1]
        if q == "\"":
            inner = inner.replace('""', '"')
        elif q == "`":
            inner = inner.replace("``", "`")
        return inner, q
    return raw, ""


def quote_identifier(name: str, quote: str) -> str:
    if quote == "\"":
        return '"' + name.replace('"', '""') + '"'
    if quote == "`":
        return "`" + name.replace("`", "``") + "`"
    if quote == "[":
        return "[" + name + "]"
    return name


def sql_string(value: str) -> str:
    return "'" + value.replace("'", "''") + "'"


# --------------------------------------------------------------------------
# Immutable AST


@dataclass(frozen=True)
class AstNode:
    id: int
    kind: str
    span: tuple[int, int]
    attrs: Mapping[str, str]
    children: tuple[int, ...] = ()
    parent: Optional[int] = None


@dataclass(frozen=True)
class SqlAst:
    nodes: tuple[AstNode, ...]
    root: int
    source_tokens: tuple[str, ...]
    dialect: str = "sqlite"
    tokens: tuple[Token, ...] = field(default=(), repr=False, compare=False)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(n.id, c) for n in self.nodes for c in n.children]

    def node(self, node_id: int) -> AstNode:
        if not isinstance(node_id, int) or not 0 <= node_id < len(self.nodes):
            raise UnknownNode(node_id)
        return self.nodes[node_id]

    def children(self, node_id: int) -> list[AstNode]:
        return [self.nodes[c] for c in self.node(node_id).children]

    def parent(self, node_id: int) -> Optional[AstNode]:
        p = self.node(node_id).parent
        return None if p is None else self.nodes[p]

    def ancestors(self, node_id: int) -> Iterator[AstNode]:
        p = self.parent(node_id)
        while p is not None:
            yield p
            p = self.parent(p.id)

    def walk(self, start: Optional[int] = None) -> Iterator[AstNode]:
        """Pre-order traversal from ``start`` (default: root)."""
        stack = [self.root if start is None else start]
        while stack:
            node = self.nodes[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def text(self, node_id: int) -> str:
        start, end = self.node(node_id).span
        return " ".join(self.source_tokens[start:end + 1])

    def structure(self, node_id: Optional[int] = None) -> tuple:
        """Nested (kind, attrs, children) tuple used for structural equality."""
        node = self.node(self.root if node_id is None else node_id)
        return (node.kind, tuple(sorted(node.attrs.items())),
                tuple(self.structure(c) for c in node.children))

    def to_tree(self, node_id: Optional[int] = None) -> "TreeNode":
        node = self.node(self.root if node_id is None else node_id)
        return TreeNode(node.kind, dict(node.attrs),
                        [self.to_tree(c) for c in node.children], origin=node.id)

    def with_attrs(self, node_id: int, **attrs: str) -> "SqlAst":
        """Copy of this AST with ``attrs`` merged into one node (spans are kept)."""
        old = self.node(node_id)
        merged = MappingProxyType({**old.attrs, **attrs})
        nodes = list(self.nodes)
        nodes[node_id] = AstNode(old.id, old.kind, old.span, merged, old.children, old.parent)
        return SqlAst(tuple(nodes), self.root, self.source_tokens, self.dialect, self.tokens)


@dataclass
class TreeNode:
    """Mutable tree used for editing; ``origin`` is the source node id, if any."""

    kind: str
    attrs: dict[str, str] = field(default_factory=dict)
    children: list["TreeNode"] = field(default_factory=list)
    origin: Optional[int] = None
    start: int = -1
    end: int = -1

    def walk(self) -> Iterator["TreeNode"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def find_origin(self, node_id: int) -> Optional["TreeNode"]:
        for n in self.walk():
            if n.origin == node_id:
                return n
        return None

    def parent_of(self, target: "TreeNode") -> Optional["TreeNode"]:
        for n in self.walk():
            if any(c is target for c in n.children):
                return n
        return None


def _freeze(tree: TreeNode, tokens: list[Token], dialect: str) -> SqlAst:
    nodes: list[Optional[AstNode]] = []

    def visit(t: TreeNode, parent: Optional[int]) -> int:
        nid = len(nodes)
        nodes.append(None)
        child_ids = tuple(visit(c, nid) for c in t.children)
        nodes[nid] = AstNode(nid, t.kind, (t.start, t.end), MappingProxyType(dict(t.attrs)),
                             child_ids, parent)
        return nid

    visit(tree, None)
    return SqlAst(tuple(nodes), 0, tuple(tok.text for tok in tokens), dialect, tuple(tokens))


# --------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.pos = 0

    # token helpers
    def peek(self, k: int = 0) -> Optional[Token]:
        i = self.pos + k
        return self.toks[i] if i < len(self.toks) else None

    def at_kw(self, *words: str, k: int = 0) -> bool:
        t = self.peek(k)
        return t is not None and t.kind == "keyword" and t.text.upper() in words

    def at_op(self, *ops: str, k: int = 0) -> bool:
        t = self.peek(k)
        return t is not None and t.kind == "op" and t.text in ops

    def error(self, message: str) -> ParseError:
        return ParseError(self.pos, message)

    def expect_kw(self, word: str) -> int:
        if not self.at_kw(word):
            raise self.error(f"expected {word}")
        self.pos += 1
        return self.pos - 1

    def expect_op(self, op: str) -> int:
        if not self.at_op(op):
            raise self.error(f"expected {op!r}")
        self.pos += 1
        return self.pos - 1

    def node(self, kind: str, start: int, end: int, children=(), **attrs: str) -> TreeNode:
        # empty quote markers are dropped; an empty string literal keeps its value
        kept = {k: v for k, v in attrs.items() if v != "" or k == "value"}
        return TreeNode(kind, kept, list(children), start=start, end=end)

    # statements
    def parse_statement(self) -> TreeNode:
        if not self.toks:
            raise ParseError(0, "empty query")
        tree = self.parse_compound()
        if self.pos < len(self.toks):
            raise self.error(f"unexpected token {self.toks[self.pos].text!r}")
        return tree

    def parse_compound(self) -> TreeNode:
        start = self.pos
        parts = [self.parse_select_core()]
        ops: list[str] = []
        while self.at_kw("UNION", "INTERSECT", "EXCEPT"):
            op = self.toks[self.pos].text.upper()
            self.pos += 1
            if op == "UNION" and self.at_kw("ALL"):
                op = "UNION ALL"
                self.pos += 1
            ops.append(op)
            parts.append(self.parse_select_core())
        tail = []
        if self.at_kw("ORDER"):
            tail.append(self.parse_order_by())
        if self.at_kw("LIMIT"):
            tail.append(self.parse_limit())
        if not ops:
            q = parts[0]
            q.children.extend(tail)
            q.end = self.pos - 1
            return q
        return self.node("compound", start, self.pos - 1, parts + tail, ops=",".join(ops))

    def parse_select_core(self) -> TreeNode:
        start = self.pos
        if not self.at_kw("SELECT"):
            raise self.error("expected SELECT")
        children = [self.parse_select_clause()]
        if self.at_kw("FROM"):
            children.append(self.parse_from())
        if self.at_kw("WHERE"):
            s = self.pos
            self.pos += 1
            cond = self.parse_expr()
            children.append(self.node("where_clause", s, self.pos - 1, [cond]))
        if self.at_kw("GROUP"):
            s = self.pos
            self.pos += 1
            self.expect_kw("BY")
            items = [self.parse_expr()]
            while self.at_op(","):
                self.pos += 1
                items.append(self.parse_expr())
            children.append(self.node("group_by", s, self.pos - 1, items))
        if self.at_kw("HAVING"):
            s = self.pos
            self.pos += 1
            cond = self.parse_expr()
            children.append(self.node("having", s, self.pos - 1, [cond]))
        return self.node("query", start, self.pos - 1, children)

    def parse_select_clause(self) -> TreeNode:
        start = self.expect_kw("SELECT")
        children = []
        if self.at_kw("DISTINCT", "ALL"):
            children.append(self.node("modifier", self.pos, self.pos,
                                      value=self.toks[self.pos].text.upper()))
            self.pos += 1
        children.append(self.parse_result_column())
        while self.at_op(","):
            self.pos += 1
            children.append(self.parse_result_column())
        return self.node("select_clause", start, self.pos - 1, children)

    def parse_result_column(self) -> TreeNode:
        if self.at_op("*"):
            self.pos += 1
            return self.node("star", self.pos - 1, self.pos - 1)
        t0, t1, t2 = self.peek(), self.peek(1), self.peek(2)
        if (t0 is not None and t0.kind in ("ident", "qident") and t1 is not None
                and t1.text == "." and t2 is not None and t2.text == "*"):
            name, quote = unquote_identifier(t0.text)
            self.pos += 3
            return self.node("star", self.pos - 3, self.pos - 1, table=name, table_quote=quote)
        expr = self.parse_expr()
        self.parse_alias(expr)
        return expr

    def parse_alias(self, target: TreeNode) -> None:
        has_as = False
        if self.at_kw("AS"):
            has_as = True
            self.pos += 1
        t = self.peek()
        if t is not None and (t.kind in ("ident", "qident") or (has_as and t.kind == "string")):
            target.attrs["alias"] = t.text
            target.attrs["alias_as"] = "true" if has_as else "false"
            self.pos += 1
            target.end = self.pos - 1
        elif has_as:
            raise self.error("expected alias after AS")

    def parse_from(self) -> TreeNode:
        start = self.expect_kw("FROM")
        children = [self.parse_table_or_subquery()]
        while True:
            js = self.pos
            if self.at_op(","):
                self.pos += 1
                jtype = ","
            else:
                words = []
                while self.at_kw("NATURAL", "LEFT", "RIGHT", "FULL", "OUTER", "INNER", "CROSS"):
                    words.append(self.toks[self.pos].text.upper())
                    self.pos += 1
                if not self.at_kw("JOIN"):
                    if words:
                        raise self.error("expected JOIN")
                    break
                self.pos += 1
                jtype = " ".join(words + ["JOIN"])
            item = self.parse_table_or_subquery()
            jchildren = [item]
            constraint = ""
            if self.at_kw("ON"):
                self.pos += 1
                constraint = "ON"
                jchildren.append(self.parse_expr())
            elif self.at_kw("USING"):
                self.pos += 1
                constraint = "USING"
                self.expect_op("(")
                while True:
                    jchildren.append(self.parse_column_name_only())
                    if not self.at_op(","):
                        break
                    self.pos += 1
                self.expect_op(")")
            children.append(self.node("join", js, self.pos - 1, jchildren,
                                      join_type=jtype, constraint=constraint))
        return self.node("from_item", start, self.pos - 1, children)

    def parse_column_name_only(self) -> TreeNode:
        t = self.peek()
        if t is None or t.kind not in ("ident", "qident"):
            raise self.error("expected column name")
        name, quote = unquote_identifier(t.text)
        self.pos += 1
        return self.node("column_ref", self.pos - 1, self.pos - 1, name=name, quote=quote)

    def parse_table_or_subquery(self) -> TreeNode:
        start = self.pos
        if self.at_op("("):
            if not self.at_kw("SELECT", k=1):
                raise self.error("parenthesized join expressions are not supported")
            self.pos += 1
            inner = self.parse_compound()
            self.expect_op(")")
            sub = self.node("subquery", start, self.pos - 1, [inner])
            self.parse_alias(sub)
            return sub
        t = self.peek()
        if t is None or t.kind not in ("ident", "qident"):
            raise self.error("expected table name")
        name, quote = unquote_identifier(t.text)
        self.pos += 1
        ref = self.node("table_ref", start, start, name=name, quote=quote)
        self.parse_alias(ref)
        return ref

    def parse_order_by(self) -> TreeNode:
        start = self.expect_kw("ORDER")
        self.expect_kw("BY")
        children = []
        while True:
            children.append(self.parse_expr())
            if self.at_kw("ASC", "DESC"):
                children.append(self.node("modifier", self.pos, self.pos,
                                          value=self.toks[self.pos].text.upper()))
                self.pos += 1
            if not self.at_op(","):
                break
            self.pos += 1
        return self.node("order_by", start, self.pos - 1, children)

    def parse_limit(self) -> TreeNode:
        start = self.expect_kw("LIMIT")
        first = self.parse_expr()
        if self.at_kw("OFFSET"):
            self.pos += 1
            second = self.parse_expr()
            return self.node("limit", start, self.pos - 1, [first, second], style="OFFSET")
        if self.at_op(","):
            self.pos += 1
            second = self.parse_expr()
            # LIMIT offset, count: children kept as (count, offset)
            return self.node("limit", start, self.pos - 1, [second, first], style="COMMA")
        return self.node("limit", start, self.pos - 1, [first])

    # expressions
    def parse_expr(self) -> TreeNode:
        return self.parse_or()

    def _nary(self, op: str, sub) -> TreeNode:
        start = self.pos
        first = sub()
        items = [first]
        while self.at_kw(op):
            self.pos += 1
            items.append(sub())
        if len(items) == 1:
            return first
        return self.node("logical_op", start, self.pos - 1, items, op=op)

    def parse_or(self) -> TreeNode:
        return self._nary("OR", self.parse_and)

    def parse_and(self) -> TreeNode:
        return self._nary("AND", self.parse_not)

    def parse_not(self) -> TreeNode:
        if self.at_kw("NOT") and not self.at_kw("EXISTS", k=1):
            start = self.pos
            self.pos += 1
            inner = self.parse_not()
            return self.node("logical_op", start, self.pos - 1, [inner], op="NOT")
        return self.parse_comparison()

    def parse_comparison(self) -> TreeNode:
        start = self.pos
        left = self.parse_arith(0)
        negate = False
        if self.at_kw("NOT") and self.at_kw("IN", "LIKE", "GLOB", "BETWEEN", k=1):
            negate = True
            self.pos += 1
        if self.at_op(*COMPARISON_OPS) and not negate:
            op = self.toks[self.pos].text
            self.pos += 1
            right = self.parse_arith(0)
            return self.node("comparison", start, self.pos - 1, [left, right], op=op)
        if self.at_kw("LIKE", "GLOB"):
            op = self.toks[self.pos].text.upper()
            self.pos += 1
            right = self.parse_arith(0)
            children = [left, right]
            attrs = {}
            if self.at_kw("ESCAPE"):
                self.pos += 1
                children.append(self.parse_arith(0))
                attrs["escape"] = "true"
            return self.node("comparison", start, self.pos - 1, children,
                             op=("NOT " if negate else "") + op, **attrs)
        if self.at_kw("BETWEEN"):
            self.pos += 1
            low = self.parse_arith(0)
            self.expect_kw("AND")
            high = self.parse_arith(0)
            return self.node("comparison", start, self.pos - 1, [left, low, high],
                             op=("NOT " if negate else "") + "BETWEEN")
        if self.at_kw("IN"):
            self.pos += 1
            right = self.parse_in_target()
            return self.node("comparison", start, self.pos - 1, [left, right],
                             op=("NOT " if negate else "") + "IN")
        if negate:
            raise self.error("expected IN, LIKE, GLOB or BETWEEN after NOT")
        if self.at_kw("IS"):
            self.pos += 1
            op = "IS"
            if self.at_kw("NOT"):
                self.pos += 1
                op = "IS NOT"
            right = self.parse_arith(0)
            return self.node("comparison", start, self.pos - 1, [left, right], op=op)
        if self.at_kw("ISNULL", "NOTNULL"):
            op = "IS" if self.at_kw("ISNULL") else "IS NOT"
            null = self.node("literal", self.pos, self.pos, value="NULL", type="null")
            self.pos += 1
            return self.node("comparison", start, self.pos - 1, [left, null], op=op)
        return left

    def parse_in_target(self) -> TreeNode:
        start = self.pos
        self.expect_op("(")
        if self.at_kw("SELECT"):
            inner = self.parse_compound()
            self.expect_op(")")
            return self.node("subquery", start, self.pos - 1, [inner])
        items = []
        if not self.at_op(")"):
            items.append(self.parse_expr())
            while self.at_op(","):
                self.pos += 1
                items.append(self.parse_expr())
        self.expect_op(")")
        return self.node("expr_list", start, self.pos - 1, items)

    def parse_arith(self, min_prec: int) -> TreeNode:
        start = self.pos
        left = self.parse_unary()
        while True:
            t = self.peek()
            if t is None or t.kind != "op" or t.text not in _ARITH_PRECEDENCE:
                return left
            prec = _ARITH_PRECEDENCE[t.text]
            if prec < min_prec:
                return left
            self.pos += 1
            right = self.parse_arith(prec + 1)
            left = self.node("binary_op", start, self.pos - 1, [left, right], op=t.text)

    def parse_unary(self) -> TreeNode:
        if self.at_op("-", "+", "~"):
            start = self.pos
            op = self.toks[self.pos].text
            self.pos += 1
            inner = self.parse_unary()
            return self.node("unary_op", start, self.pos - 1, [inner], op=op)
        return self.parse_primary()

    def parse_primary(self) -> TreeNode:
        t = self.peek()
        if t is None:
            raise self.error("unexpected end of query")
        start = self.pos
        if t.kind == "number":
            self.pos += 1
            return self.node("literal", start, start, value=t.text, type="number")
        if t.kind == "string":
            self.pos += 1
            return self.node("literal", start, start, value=t.text[1:-1].replace("''", "'"),
                             type="string")
        if t.kind == "keyword":
            word = t.text.upper()
            if word == "NULL":
                self.pos += 1
                return self.node("literal", start, start, value="NULL", type="null")
            if word in ("TRUE", "FALSE"):
                self.pos += 1
                return self.node("literal", start, start, value=word, type="bool")
            if word == "CASE":
                return self.parse_case()
            if word == "CAST":
                return self.parse_cast()
            if word == "EXISTS" or (word == "NOT" and self.at_kw("EXISTS", k=1)):
                negated = word == "NOT"
                self.pos += 2 if negated else 1
                sub_start = self.pos
                self.expect_op("(")
                inner = self.parse_compound()
                self.expect_op(")")
                sub = self.node("subquery", sub_start, self.pos - 1, [inner])
                pred = self.node("predicate", start + (1 if negated else 0), self.pos - 1,
                                 [sub], op="EXISTS")
                if negated:
                    return self.node("logical_op", start, self.pos - 1, [pred], op="NOT")
                return pred
            raise self.error(f"unexpected keyword {t.text!r}")
        if t.kind == "op" and t.text == "(":
            if self.at_kw("SELECT", k=1):
                self.pos += 1
                inner = self.parse_compound()
                self.expect_op(")")
                return self.node("subquery", start, self.pos - 1, [inner])
            self.pos += 1
            inner = self.parse_expr()
            if self.at_op(","):
                items = [inner]
                while self.at_op(","):
                    self.pos += 1
                    items.append(self.parse_expr())
                self.expect_op(")")
                return self.node("expr_list", start, self.pos - 1, items)
            self.expect_op(")")
            inner.attrs["parens"] = str(int(inner.attrs.get("parens", "0")) + 1)
            inner.start, inner.end = start, self.pos - 1
            return inner
        if t.kind in ("ident", "qident"):
            if t.kind == "ident" and self.at_op("(", k=1):
                return self.parse_function()
            name, quote = unquote_identifier(t.text)
            self.pos += 1
            if self.at_op(".") and self.peek(1) is not None and self.peek(1).kind in ("ident", "qident"):
                col, cquote = unquote_identifier(self.toks[self.pos + 1].text)
                self.pos += 2
                return self.node("column_ref", start, self.pos - 1, name=col, quote=cquote,
                                 table=name, table_quote=quote)
            return self.node("column_ref", start, start, name=name, quote=quote)
        raise self.error(f"unexpected token {t.text!r}")

    def parse_function(self) -> TreeNode:
        start = self.pos
        name = self.toks[self.pos].text.upper()
        self.pos += 2
        children = []
        if self.at_kw("DISTINCT"):
            children.append(self.node("modifier", self.pos, self.pos, value="DISTINCT"))
            self.pos += 1
        if self.at_op("*"):
            children.append(self.node("star", self.pos, self.pos))
            self.pos += 1
        elif not self.at_op(")"):
            children.append(self.parse_expr())
            while self.at_op(","):
                self.pos += 1
                children.append(self.parse_expr())
        self.expect_op(")")
        if self.at_kw("OVER"):
            raise self.error("window functions are not supported")
        return self.node("function_call", start, self.pos - 1, children, name=name)

    def parse_cast(self) -> TreeNode:
        start = self.expect_kw("CAST")
        self.expect_op("(")
        inner = self.parse_expr()
        self.expect_kw("AS")
        words = []
        while not self.at_op(")"):
            t = self.peek()
            if t is None:
                raise self.error("unterminated CAST")
            words.append(t.text)
            self.pos += 1
        if not words:
            raise self.error("expected type name in CAST")
        self.expect_op(")")
        type_name = " ".join(words).replace(" (", "(").replace("( ", "(").replace(" )", ")")
        return self.node("function_call", start, self.pos - 1, [inner], name="CAST",
                         as_type=type_name)

    def parse_case(self) -> TreeNode:
        start = self.expect_kw("CASE")
        children = []
        attrs = {"name": "CASE", "has_operand": "false", "has_else": "false"}
        if not self.at_kw("WHEN"):
            children.append(self.parse_expr())
            attrs["has_operand"] = "true"
        if not self.at_kw("WHEN"):
            raise self.error("expected WHEN")
        while self.at_kw("WHEN"):
            self.pos += 1
            children.append(self.parse_expr())
            self.expect_kw("THEN")
            children.append(self.parse_expr())
        if self.at_kw("ELSE"):
            self.pos += 1
            children.append(self.parse_expr())
            attrs["has_else"] = "true"
        self.expect_kw("END")
        return self.node("function_call", start, self.pos - 1, children, **attrs)


def parse_sql(text: str, dialect: str = "sqlite") -> SqlAst:
    """Parse ``text`` into an aligned :class:`SqlAst`.

    Raises :class:`ParseError` with the offending token index on invalid input.
    """
    if dialect not in SUPPORTED_DIALECTS:
        raise UnsupportedDialect(dialect)
    if not text or not text.strip():
        raise ParseError(0, "empty query")
    tokens = tokenize(text)
    tree = _Parser(tokens).parse_statement()
    return _freeze(tree, tokens, dialect)


# --------------------------------------------------------------------------
# Rendering

_LOGICAL_PREC = {"OR": 1, "AND": 2, "NOT": 3}


def _expr_prec(node: TreeNode) -> int:
    if node.attrs.get("parens"):
        return 100
    if node.kind == "logical_op":
        return _LOGICAL_PREC[node.attrs["op"]]
    if node.kind == "comparison":
        return 4
    if node.kind == "binary_op":
        return 5 + _ARITH_PRECEDENCE[node.attrs["op"]]
    return 100


def _wrap(node: TreeNode, min_prec: int) -> str:
    text = render(node)
    if _expr_prec(node) < min_prec:
        return "(" + text + ")"
    return text


def _with_alias(node: TreeNode, text: str) -> str:
    alias = node.attrs.get("alias")
    if alias is None:
        return text
    return f"{text} AS {alias}" if node.attrs.get("alias_as", "true") == "true" else f"{text} {alias}"


def render(node: TreeNode) -> str:
    """Render a (possibly edited) tree to SQL text."""
    text = _render_bare(node)
    parens = int(node.attrs.get("parens", "0") or 0)
    text = "(" * parens + text + ")" * parens
    if node.kind not in ("table_ref", "subquery"):
        text = _with_alias(node, text)
    return text


def _render_bare(node: TreeNode) -> str:
    k, a, ch = node.kind, node.attrs, node.children
    if k == "query":
        return " ".join(render(c) for c in ch)
    if k == "compound":
        ops = a["ops"].split(",")
        parts = [render(ch[0])]
        for op, q in zip(ops, ch[1:]):
            parts += [op, render(q)]
        parts += [render(c) for c in ch[len(ops) + 1:]]
        return " ".join(parts)
    if k == "select_clause":
        items = list(ch)
        head = "SELECT"
        if items and items[0].kind == "modifier":
            head += " " + items.pop(0).attrs["value"]
        return head + " " + ", ".join(render(c) for c in items)
    if k == "from_item":
        out = "FROM " + render(ch[0])
        for j in ch[1:]:
            out += (", " if j.attrs.get("join_type") == "," else " ") + render(j)
        return out
    if k == "join":
        jt = a.get("join_type", "JOIN")
        out = render(ch[0]) if jt == "," else f"{jt} {render(ch[0])}"
        if a.get("constraint") == "ON":
            out += " ON " + render(ch[1])
        elif a.get("constraint") == "USING":
            out += " USING (" + ", ".join(render(c) for c in ch[1:]) + ")"
        return out
    if k == "table_ref":
        return _with_alias(node, quote_identifier(a["name"], a.get("quote", "")))
    if k == "subquery":
        return _with_alias(node, "(" + render(ch[0]) + ")")
    if k == "where_clause":
        return "WHERE " + render(ch[0])
    if k == "having":
        return "HAVING " + render(ch[0])
    if k == "group_by":
        return "GROUP BY " + ", ".join(render(c) for c in ch)
    if k == "order_by":
        parts: list[str] = []
        for c in ch:
            if c.kind == "modifier" and parts:
                parts[-1] += " " + c.attrs["value"]
            else:
                parts.append(render(c))
        return "ORDER BY " + ", ".join(parts)
    if k == "limit":
        if a.get("style") == "COMMA":
            return f"LIMIT {render(ch[1])}, {render(ch[0])}"
        if len(ch) > 1:
            return f"LIMIT {render(ch[0])} OFFSET {render(ch[1])}"
        return "LIMIT " + render(ch[0])
    if k == "logical_op":
        op = a["op"]
        if op == "NOT":
            return "NOT " + _wrap(ch[0], _LOGICAL_PREC["NOT"])
        prec = _LOGICAL_PREC[op]
        return f" {op} ".join(_wrap(c, prec + (1 if i else 0)) for i, c in enumerate(ch))
    if k == "comparison":
        op = a["op"]
        left = _wrap(ch[0], 5)
        if op.endswith("BETWEEN"):
            return f"{left} {op} {_wrap(ch[1], 5)} AND {_wrap(ch[2], 5)}"
        if op.endswith("LIKE") or op.endswith("GLOB"):
            out = f"{left} {op} {_wrap(ch[1], 5)}"
            if a.get("escape") == "true":
                out += f" ESCAPE {_wrap(ch[2], 5)}"
            return out
        return f"{left} {op} {_wrap(ch[1], 5)}"
    if k == "predicate":
        return "EXISTS " + render(ch[0])
    if k == "binary_op":
        prec = 5 + _ARITH_PRECEDENCE[a["op"]]
        return f"{_wrap(ch[0], prec)} {a['op']} {_wrap(ch[1], prec + 1)}"
    if k == "unary_op":
        inner = _wrap(ch[0], 100)
        sep = " " if a["op"] in "-+" and inner[:1] in "-+" else ""
        return a["op"] + sep + inner
    if k == "function_call":
        name = a["name"]
        if name == "CAST":
            return f"CAST({render(ch[0])} AS {a['as_type']})"
        if name == "CASE":
            items = list(ch)
            out = ["CASE"]
            if a.get("has_operand") == "true":
                out.append(render(items.pop(0)))
            else_part = items.pop() if a.get("has_else") == "true" else None
            for i in range(0, len(items), 2):
                out += ["WHEN", render(items[i]), "THEN", render(items[i + 1])]
            if else_part is not None:
                out += ["ELSE", render(else_part)]
            out.append("END")
            return " ".join(out)
        items = list(ch)
        prefix = ""
        if items and items[0].kind == "modifier":
            prefix = items.pop(0).attrs["value"] + " "
        return f"{name}({prefix}{', '.join(render(c) for c in items)})"
    if k == "column_ref":
        col = quote_identifier(a["name"], a.get("quote", ""))
        if "table" in a:
            return quote_identifier(a["table"], a.get("table_quote", "")) + "." + col
        return col
    if k == "star":
        if "table" in a:
            return quote_identifier(a["table"], a.get("table_quote", "")) + ".*"
        return "*"
    if k == "literal":
        if a.get("type") == "string":
            return sql_string(a["value"])
        return a["value"]
    if k == "modifier":
        return a["value"]
    if k == "expr_list":
        return "(" + ", ".join(render(c) for c in ch) + ")"
    raise ValueError(f"cannot render node kind {k!r}")


def flatten_ast(ast: SqlAst) -> str:
    """Render ``ast`` back to SQL text."""
    return render(ast.to_tree())


# --------------------------------------------------------------------------
# Fragments and schema references


@dataclass(frozen=True)
class AstFragment:
    """A subtree of ``ast`` rooted at ``root`` (None for the empty fragment)."""

    ast: SqlAst
    root: Optional[int]
    targets: frozenset = frozenset()

    @property
    def is_empty(self) -> bool:
        return self.root is None

    @property
    def node_ids(self) -> list[int]:
        if self.root is None:
            return []
        return [n.id for n in self.ast.walk(self.root)]

    @property
    def span(self) -> Optional[tuple[int, int]]:
        return None if self.root is None else self.ast.node(self.root).span

    @property
    def kind(self) -> Optional[str]:
        return None if self.root is None else self.ast.node(self.root).kind

    def text(self) -> str:
        return "" if self.root is None else render(self.ast.to_tree(self.root))


def minimal_enclosing_subtree(ast: SqlAst, node_ids: Iterable[int]) -> AstFragment:
    """Smallest subtree holding every id, widened to the nearest clause ancestor."""
    ids = list(dict.fromkeys(node_ids))
    for nid in ids:
        ast.node(nid)
    if not ids:
        return AstFragment(ast, None)

    def path(nid: int) -> list[int]:
        chain = [nid] + [a.id for a in ast.ancestors(nid)]
        return chain[::-1]

    paths = [path(i) for i in ids]
    lca = ast.root
    for level in zip(*paths):
        if all(x == level[0] for x in level):
            lca = level[0]
        else:
            break
    root = lca
    for candidate in [lca] + [a.id for a in ast.ancestors(lca)]:
        if ast.node(candidate).kind in CLAUSE_KINDS:
            root = candidate
            break
    else:
        root = ast.root
    return AstFragment(ast, root, frozenset(ids))


@dataclass(frozen=True)
class SchemaReference:
    node_id: int
    kind: str  # table, column, literal
    name: str
    qualifier: Optional[str] = None
    predicate_context: Optional[tuple[str, str]] = None
    resolved_table: Optional[str] = None


def scope_bindings(ast: SqlAst, query_id: int) -> dict[str, str]:
    """Map alias/name (case-folded) -> table name for the FROM items of one query."""
    bindings: dict[str, str] = {}
    for child in ast.children(query_id):
        if child.kind != "from_item":
            continue
        for item in ast.children(child.id):
            ref = ast.children(item.id)[0] if item.kind == "join" else item
            if ref.kind == "table_ref":
                table = ref.attrs["name"]
                bindings.setdefault(table.casefold(), table)
                if "alias" in ref.attrs:
                    alias, _ = unquote_identifier(ref.attrs["alias"])
                    bindings[alias.casefold()] = table
    return bindings


def enclosing_query(ast: SqlAst, node_id: int) -> Optional[int]:
    for a in ast.ancestors(node_id):
        if a.kind == "query":
            return a.id
    return None


def resolve_qualifier(ast: SqlAst, node_id: int, qualifier: str) -> Optional[str]:
    """Resolve a table alias visible from ``node_id`` to its table name."""
    q = enclosing_query(ast, node_id)
    while q is not None:
        bound = scope_bindings(ast, q).get(qualifier.casefold())
        if bound is not None:
            return bound
        q = enclosing_query(ast, q)
    return None


_LOGICAL_ORDER = {"from_item": 0, "where_clause": 1, "group_by": 2, "having": 3,
                  "select_clause": 4, "order_by": 5, "limit": 6}


def _reference_order(ast: SqlAst, node_id: Optional[int] = None) -> Iterator[AstNode]:
    node = ast.node(ast.root if node_id is None else node_id)
    yield node
    children = ast.children(node.id)
    if node.kind == "query":
        children = sorted(children, key=lambda c: _LOGICAL_ORDER.get(c.kind, 9))
    for c in children:
        yield from _reference_order(ast, c.id)


def collect_schema_references(ast: SqlAst) -> list[SchemaReference]:
    """Every table/column/literal reference, visiting each query's FROM first."""
    refs: list[SchemaReference] = []
    for node in _reference_order(ast):
        if node.kind == "table_ref":
            alias = node.attrs.get("alias")
            refs.append(SchemaReference(node.id, "table", node.attrs["name"],
                                        unquote_identifier(alias)[0] if alias else None,
                                        resolved_table=node.attrs["name"]))
        elif node.kind == "column_ref":
            qual = node.attrs.get("table")
            resolved = resolve_qualifier(ast, node.id, qual) if qual else None
            refs.append(SchemaReference(node.id, "column", node.attrs["name"], qual,
                                        resolved_table=resolved))
        elif node.kind == "literal":
            refs.append(SchemaReference(node.id, "literal", node.attrs["value"],
                                        predicate_context=_predicate_context(ast, node)))
    return refs


def _predicate_context(ast: SqlAst, literal: AstNode) -> Optional[tuple[str, str]]:
    parent = ast.parent(literal.id)
    if parent is not None and parent.kind == "expr_list":
        parent = ast.parent(parent.id)
        if parent is None or parent.kind != "comparison" or not parent.attrs["op"].endswith("IN"):
            return None
    if parent is None or parent.kind != "comparison":
        return None
    column = next((c for c in ast.children(parent.id) if c.kind == "column_ref"), None)
    if column is None:
        return None
    qual = column.attrs.get("table")
    table = resolve_qualifier(ast, column.id, qual) if qual else None
    name = f"{table}.{column.attrs['name']}" if table else column.attrs["name"]
    return name, parent.attrs["op"]


def render_tree(ast: SqlAst, node_id: Optional[int] = None, indent: str = "  ") -> str:
    """Indented one-node-per-line rendering used in model inputs."""
    lines = []

    def visit(nid: int, depth: int) -> None:
        node = ast.node(nid)
        attrs = " ".join(f"{k}={v}" for k, v in sorted(node.attrs.items()))
        lines.append(f"{indent * depth}{node.kind}#{nid} [{node.span[0]}..{node.span[1]}]"
                     + (f" {attrs}" if attrs else ""))
        for c in node.children:
            visit(c, depth + 1)

    visit(ast.root if node_id is None else node_id, 0)
    return "\n".join(lines)
