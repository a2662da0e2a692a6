"""Tokenizer shared by the application language and the expression language.

Scanning is positional and stateless: ``scan_token(text, pos)`` returns the
next token starting at or after ``pos``, which makes backtracking and the
parser's switch into XML-constructor mode trivial (the parser simply re-reads
raw characters from an offset).

Comments use the ``(: ... :)`` form and may nest.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ParseError

SYMBOLS = (
    "//",
    ":=",
    "!=",
    "<=",
    ">=",
    "(",
    ")",
    "[",
    "]",
    "{",
    "}",
    ",",
    "/",
    "@",
    "*",
    "$",
    "=",
    "<",
    ">",
)

NAME = "name"
STRING = "string"
INTEGER = "integer"
DECIMAL = "decimal"
EOF = "eof"


@dataclass(frozen=True)
class Token:
    kind: str
    value: str
    start: int
    end: int


def _name_start(ch: str) -> bool:
    return ch.isalpha() or ch == "_"


def _name_char(ch: str) -> bool:
    return ch.isalnum() or ch in "_-."


def line_col(text: str, offset: int) -> tuple[int, int]:
    line = text.count("\n", 0, offset) + 1
    nl = text.rfind("\n", 0, offset)
    return line, offset - nl


def error_at(text: str, offset: int, message: str, token: str = "") -> ParseError:
    line, col = line_col(text, offset)
    return ParseError(message, line, col, token)


def skip_ignorable(text: str, pos: int) -> int:
    """Advance past whitespace and (possibly nested) comments."""
    n = len(text)
    while pos < n:
        ch = text[pos]
        if ch.isspace():
            pos += 1
        elif ch == "(" and pos + 1 < n and text[pos + 1] == ":":
            depth = 1
            i = pos + 2
            while i < n and depth:
                if text.startswith("(:", i):
                    depth += 1
                    i += 2
                elif text.startswith(":)", i):
                    depth -= 1
                    i += 2
                else:
                    i += 1
            if depth:
                raise error_at(text, pos, "unterminated comment")
            pos = i
        else:
            break
    return pos


def scan_string(text: str, pos: int) -> tuple[str, int]:
    """Scan a quoted literal at pos; doubling the quote escapes it."""
    quote = text[pos]
    i = pos + 1
    parts: list[str] = []
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == quote:
            if i + 1 < n and text[i + 1] == quote:
                parts.append(quote)
                i += 2
                continue
            return "".join(parts), i + 1
        parts.append(ch)
        i += 1
    raise error_at(text, pos, "unterminated string literal")


def scan_token(text: str, pos: int) -> Token:
    pos = skip_ignorable(text, pos)
    n = len(text)
    if pos >= n:
        return Token(EOF, "", pos, pos)
    ch = text[pos]
    if ch in "\"'":
        value, end = scan_string(text, pos)
        return Token(STRING, value, pos, end)
    if ch.isdigit():
        i = pos
        while i < n and text[i].isdigit():
            i += 1
        if i < n and text[i] == "." and i + 1 < n and text[i + 1].isdigit():
            i += 1
            while i < n and text[i].isdigit():
                i += 1
            return Token(DECIMAL, text[pos:i], pos, i)
        if i < n and _name_start(text[i]):
            raise error_at(text, pos, "malformed number")
        return Token(INTEGER, text[pos:i], pos, i)
    if _name_start(ch):
        i = pos + 1
        while i < n and _name_char(text[i]):
            i += 1
        # one optional prefix: "qs:message", "xs:string"
        if i < n and text[i] == ":" and i + 1 < n and _name_start(text[i + 1]):
            i += 1
            while i < n and _name_char(text[i]):
                i += 1
        return Token(NAME, text[pos:i], pos, i)
    for sym in SYMBOLS:
        if text.startswith(sym, pos):
            return Token(sym, sym, pos, pos + len(sym))
    raise error_at(text, pos, f"unexpected character {ch!r}", ch)


def local_name(qname: str) -> str:
    """Strip the lexical prefix; names resolve against one default scope."""
    return qname.split(":", 1)[1] if ":" in qname else qname
