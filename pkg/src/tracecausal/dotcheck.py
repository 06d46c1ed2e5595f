"""A small recursive-descent checker for the subset of DOT this package writes.

Covers graph/digraph headers, node, edge and attribute statements, ``a=b``
statements, attribute lists, quoted/numeric/bare IDs, and comments.
Subgraphs, ports and HTML labels are rejected as unsupported.
"""
from __future__ import annotations

import re

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>//[^\n]*|/\*.*?\*/|^\#[^\n]*)
  | (?P<arrow>->|--)
  | (?P<punct>[{}\[\];,=])
  | (?P<qstr>"(?:[^"\\]|\\.)*")
  | (?P<num>-?(?:\.\d+|\d+(?:\.\d*)?))
  | (?P<ident>[A-Za-z_\x80-￿][A-Za-z_0-9\x80-￿]*)
    """,
    re.VERBOSE | re.DOTALL | re.MULTILINE,
)

KEYWORDS = {"strict", "graph", "digraph", "node", "edge", "subgraph"}


class DotSyntaxError(ValueError):
    pass


def _tokenize(text: str) -> list[tuple[str, str]]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise DotSyntaxError(f"unexpected character {text[pos]!r} at offset {pos}")
        kind = m.lastgroup
        val = m.group()
        pos = m.end()
        if kind in ("ws", "comment"):
            continue
        if kind == "ident" and val.lower() in KEYWORDS:
            kind = "kw"
            val = val.lower()
        toks.append((kind, val))
    return toks


class _Parser:
    def __init__(self, toks):
        self.toks = toks
        self.i = 0
        self.directed = True

    def peek(self, offset=0):
        j = self.i + offset
        return self.toks[j] if j < len(self.toks) else ("eof", "")

    def take(self, kind=None, val=None):
        tok = self.peek()
        if (kind and tok[0] != kind) or (val and tok[1] != val):
            want = val or kind
            raise DotSyntaxError(f"expected {want!r}, got {tok[1]!r} (token {self.i})")
        self.i += 1
        return tok

    def is_id(self, tok):
        return tok[0] in ("ident", "qstr", "num")

    def graph(self):
        if self.peek() == ("kw", "strict"):
            self.take()
        kw = self.take("kw")[1]
        if kw not in ("graph", "digraph"):
            raise DotSyntaxError("graph must start with 'graph' or 'digraph'")
        self.directed = kw == "digraph"
        if self.is_id(self.peek()):
            self.take()
        self.take("punct", "{")
        self.stmt_list()
        self.take("punct", "}")
        if self.peek()[0] != "eof":
            raise DotSyntaxError("trailing content after graph body")

    def stmt_list(self):
        while self.peek() != ("punct", "}"):
            if self.peek()[0] == "eof":
                raise DotSyntaxError("unterminated graph body")
            self.stmt()
            if self.peek() == ("punct", ";"):
                self.take()

    def stmt(self):
        tok = self.peek()
        if tok[0] == "kw":
            if tok[1] in ("graph", "node", "edge"):
                self.take()
                self.attr_list(required=True)
                return
            raise DotSyntaxError(f"unsupported statement {tok[1]!r}")
        if not self.is_id(tok):
            raise DotSyntaxError(f"expected a statement, got {tok[1]!r}")
        self.take()
        if self.peek() == ("punct", "="):
            self.take()
            self.id_()
            return
        while self.peek()[0] == "arrow":
            op = self.take()[1]
            if (op == "->") != self.directed:
                raise DotSyntaxError(f"edge operator {op!r} does not match graph type")
            self.id_()
        if self.peek() == ("punct", "["):
            self.attr_list(required=True)

    def id_(self):
        if not self.is_id(self.peek()):
            raise DotSyntaxError(f"expected an ID, got {self.peek()[1]!r}")
        self.take()

    def attr_list(self, required=False):
        if required and self.peek() != ("punct", "["):
            raise DotSyntaxError("expected '['")
        while self.peek() == ("punct", "["):
            self.take()
            while self.peek() != ("punct", "]"):
                self.id_()
                self.take("punct", "=")
                self.id_()
                if self.peek() in (("punct", ","), ("punct", ";")):
                    self.take()
            self.take("punct", "]")


def validate_dot(text: str) -> None:
    """Raise DotSyntaxError unless ``text`` is one well-formed graph."""
    _Parser(_tokenize(text)).graph()


def is_valid_dot(text: str) -> bool:
    try:
        validate_dot(text)
    except DotSyntaxError:
        return False
    return True
