"""Recursive-descent parser for the expression language.

The grammar is an XQuery-flavoured subset: literals, variables, let/for
bindings, conditionals, general comparisons, and/or, paths over the child,
descendant-or-self and attribute axes, direct element constructors, and the
two updating forms ``do enqueue`` and ``do reset``.

Two deliberate departures from strict XQuery, documented in the language
reference: ``else`` may be omitted (meaning the empty sequence), and the
bodies of ``then``/``else``/``return`` accept comma sequences greedily so a
conditional can guard several updates without extra parentheses.

Keywords are contextual; ``if``, ``let``, ``for`` and ``do`` are recognized
only in the token shapes where the construct can start, so those words stay
usable as element name tests.
"""

from __future__ import annotations

from decimal import Decimal

from ..errors import ParseError
from . import ast
from .lexer import (
    DECIMAL,
    EOF,
    INTEGER,
    NAME,
    STRING,
    Token,
    error_at,
    local_name,
    scan_token,
    _name_start,
)

_COMPARISON_OPS = ("=", "!=", "<", "<=", ">", ">=")

_ENTITIES = {"lt": "<", "gt": ">", "amp": "&", "quot": '"', "apos": "'"}


class ExprParser:
    """Parses expressions from ``text`` starting at a given offset.

    The parser tracks a single integer position, so the application language
    parser can hand over mid-file and read the resume offset back from
    ``self.pos`` when the expression ends.
    """

    def __init__(self, text: str, pos: int = 0):
        self.text = text
        self.pos = pos

    # token plumbing

    def peek(self) -> Token:
        return scan_token(self.text, self.pos)

    def advance(self) -> Token:
        tok = self.peek()
        self.pos = tok.end
        return tok

    def after(self, tok: Token) -> Token:
        return scan_token(self.text, tok.end)

    def error(self, message: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.peek()
        shown = tok.value or tok.kind
        return error_at(self.text, tok.start, f"{message} (found {shown!r})", shown)

    def expect(self, kind: str) -> Token:
        tok = self.peek()
        if tok.kind != kind:
            raise self.error(f"expected {kind!r}")
        return self.advance()

    def expect_keyword(self, word: str) -> Token:
        tok = self.peek()
        if tok.kind != NAME or tok.value != word:
            raise self.error(f"expected keyword {word!r}")
        return self.advance()

    def at_keyword(self, word: str) -> bool:
        tok = self.peek()
        return tok.kind == NAME and tok.value == word

    # grammar

    def parse_expr(self) -> ast.Expr:
        items = [self.parse_expr_single()]
        while self.peek().kind == ",":
            self.advance()
            items.append(self.parse_expr_single())
        if len(items) == 1:
            return items[0]
        return ast.SequenceExpr(tuple(items))

    def parse_expr_single(self) -> ast.Expr:
        tok = self.peek()
        if tok.kind == NAME:
            if tok.value == "if" and self.after(tok).kind == "(":
                return self._parse_if()
            if tok.value in ("let", "for") and self.after(tok).kind == "$":
                return self._parse_flwor()
            if tok.value == "do":
                nxt = self.after(tok)
                if nxt.kind == NAME and nxt.value in ("enqueue", "reset"):
                    return self._parse_do()
        return self._parse_or()

    def _parse_if(self) -> ast.IfExpr:
        self.advance()
        self.expect("(")
        cond = self.parse_expr()
        self.expect(")")
        self.expect_keyword("then")
        then = self.parse_expr()
        orelse = None
        if self.at_keyword("else"):
            self.advance()
            orelse = self.parse_expr()
        return ast.IfExpr(cond, then, orelse)

    def _parse_flwor(self) -> ast.Expr:
        clauses: list[tuple[str, str, ast.Expr]] = []
        while True:
            tok = self.peek()
            if (
                tok.kind == NAME
                and tok.value in ("let", "for")
                and self.after(tok).kind == "$"
            ):
                self.advance()
                self.expect("$")
                var = self.expect(NAME).value
                if tok.value == "let":
                    self.expect(":=")
                    clauses.append(("let", var, self.parse_expr_single()))
                else:
                    self.expect_keyword("in")
                    clauses.append(("for", var, self.parse_expr_single()))
            else:
                break
        where = None
        if self.at_keyword("where"):
            self.advance()
            where = self.parse_expr_single()
        self.expect_keyword("return")
        body: ast.Expr = self.parse_expr()
        if where is not None:
            kind, var, domain = clauses[-1]
            if kind == "for":
                clauses.pop()
                body = ast.ForExpr(var, domain, where, body)
            else:
                body = ast.IfExpr(where, body, None)
        for kind, var, domain in reversed(clauses):
            if kind == "let":
                body = ast.LetExpr(var, domain, body)
            else:
                body = ast.ForExpr(var, domain, None, body)
        return body

    def _parse_do(self) -> ast.Expr:
        self.advance()
        verb = self.expect(NAME)
        if verb.value == "enqueue":
            body = self.parse_expr_single()
            self.expect_keyword("into")
            queue = local_name(self.expect(NAME).value)
            with_clauses = []
            while self.at_keyword("with"):
                self.advance()
                prop = local_name(self.expect(NAME).value)
                self.expect_keyword("value")
                with_clauses.append((prop, self.parse_expr_single()))
            return ast.DoEnqueue(body, queue, tuple(with_clauses))
        if verb.value == "reset":
            tok = self.peek()
            if tok.kind == NAME:
                nxt = self.after(tok)
                if nxt.kind == NAME and nxt.value == "key":
                    slicing = local_name(self.advance().value)
                    self.advance()  # key
                    return ast.DoReset(slicing, self.parse_expr_single())
            return ast.DoReset(None, None)
        raise self.error("expected 'enqueue' or 'reset' after 'do'", verb)

    def _parse_or(self) -> ast.Expr:
        items = [self._parse_and()]
        while self.at_keyword("or"):
            self.advance()
            items.append(self._parse_and())
        if len(items) == 1:
            return items[0]
        return ast.OrExpr(tuple(items))

    def _parse_and(self) -> ast.Expr:
        items = [self._parse_comparison()]
        while self.at_keyword("and"):
            self.advance()
            items.append(self._parse_comparison())
        if len(items) == 1:
            return items[0]
        return ast.AndExpr(tuple(items))

    def _parse_comparison(self) -> ast.Expr:
        left = self._parse_path()
        tok = self.peek()
        if tok.kind in _COMPARISON_OPS:
            self.advance()
            right = self._parse_path()
            if self.peek().kind in _COMPARISON_OPS:
                raise self.error("comparisons do not chain")
            return ast.ComparisonExpr(tok.kind, left, right)
        return left

    # paths

    def _parse_path(self) -> ast.Expr:
        tok = self.peek()
        steps: list[ast.PathStep] = []
        if tok.kind == "/":
            self.advance()
            nxt = self.peek()
            if nxt.kind in (NAME, "*", "@") and not (
                nxt.kind == NAME and self.after(nxt).kind == "("
            ):
                steps.append(self._parse_axis_step())
                self._parse_path_tail(steps)
            return ast.PathExpr(None, True, tuple(steps))
        if tok.kind == "//":
            self.advance()
            steps.append(ast.PathStep(ast.DESCEND, None))
            steps.append(self._parse_axis_step())
            self._parse_path_tail(steps)
            return ast.PathExpr(None, True, tuple(steps))
        if tok.kind == "@" or tok.kind == "*":
            steps.append(self._parse_axis_step())
            self._parse_path_tail(steps)
            return ast.PathExpr(None, False, tuple(steps))
        if tok.kind == NAME and self.after(tok).kind != "(":
            steps.append(self._parse_axis_step())
            self._parse_path_tail(steps)
            return ast.PathExpr(None, False, tuple(steps))
        # primary expression, optionally continued as a path
        source = self._parse_primary()
        predicates: list[ast.Expr] = []
        while self.peek().kind == "[":
            self.advance()
            predicates.append(self.parse_expr())
            self.expect("]")
        if predicates:
            steps.append(ast.PathStep(ast.FILTER, None, tuple(predicates)))
        self._parse_path_tail(steps)
        if not steps:
            return source
        return ast.PathExpr(source, False, tuple(steps))

    def _parse_path_tail(self, steps: list[ast.PathStep]) -> None:
        while True:
            tok = self.peek()
            if tok.kind == "/":
                self.advance()
                steps.append(self._parse_axis_step())
            elif tok.kind == "//":
                self.advance()
                steps.append(ast.PathStep(ast.DESCEND, None))
                steps.append(self._parse_axis_step())
            else:
                return

    def _parse_axis_step(self) -> ast.PathStep:
        tok = self.peek()
        if tok.kind == "@":
            self.advance()
            test = self._parse_name_test()
            axis = ast.ATTRIBUTE
        elif tok.kind in (NAME, "*"):
            if tok.kind == NAME and self.after(tok).kind == "(":
                raise self.error("function calls are not allowed as path steps")
            test = self._parse_name_test()
            axis = ast.CHILD
        else:
            raise self.error("expected a path step")
        predicates = []
        while self.peek().kind == "[":
            self.advance()
            predicates.append(self.parse_expr())
            self.expect("]")
        return ast.PathStep(axis, test, tuple(predicates))

    def _parse_name_test(self) -> str:
        tok = self.peek()
        if tok.kind == "*":
            self.advance()
            return "*"
        if tok.kind == NAME:
            self.advance()
            return local_name(tok.value)
        raise self.error("expected a name test")

    # primaries

    def _parse_primary(self) -> ast.Expr:
        tok = self.peek()
        if tok.kind == STRING:
            self.advance()
            return ast.StringLit(tok.value)
        if tok.kind == INTEGER:
            self.advance()
            return ast.IntLit(int(tok.value))
        if tok.kind == DECIMAL:
            self.advance()
            return ast.DecLit(Decimal(tok.value))
        if tok.kind == "$":
            self.advance()
            return ast.VarRef(self.expect(NAME).value)
        if tok.kind == "(":
            self.advance()
            if self.peek().kind == ")":
                self.advance()
                return ast.EmptySeq()
            inner = self.parse_expr()
            self.expect(")")
            return inner
        if tok.kind == NAME and self.after(tok).kind == "(":
            self.advance()
            self.advance()  # (
            args = []
            if self.peek().kind != ")":
                args.append(self.parse_expr_single())
                while self.peek().kind == ",":
                    self.advance()
                    args.append(self.parse_expr_single())
            self.expect(")")
            return ast.FnCall(tok.value, tuple(args))
        if tok.kind == "<" and _name_start(self.text[tok.end : tok.end + 1] or " "):
            return self._parse_constructor()
        raise self.error("expected an expression")

    # direct element constructors: the parser leaves token mode and reads
    # raw characters, re-entering token mode inside { } enclosed expressions.

    def _parse_constructor(self) -> ast.ElemConstructor:
        lt = self.expect("<")
        i = lt.end
        name, i = self._read_raw_name(i)
        i = self._skip_raw_space(i)
        text = self.text
        if text.startswith("/>", i):
            self.pos = i + 2
            return ast.ElemConstructor(local_name(name), ())
        if not text.startswith(">", i):
            raise error_at(text, i, "constructor attributes are not supported")
        i += 1
        content: list = []
        literal: list[str] = []

        def flush():
            if literal:
                joined = "".join(literal)
                literal.clear()
                if joined.strip():
                    content.append(ast.TextItem(joined))

        while True:
            if i >= len(text):
                raise error_at(text, lt.start, f"unterminated constructor <{name}>")
            ch = text[i]
            if ch == "{":
                if text.startswith("{{", i):
                    literal.append("{")
                    i += 2
                    continue
                flush()
                self.pos = i + 1
                content.append(ast.EnclosedExpr(self.parse_expr()))
                self.expect("}")
                i = self.pos
            elif ch == "}":
                if text.startswith("}}", i):
                    literal.append("}")
                    i += 2
                    continue
                raise error_at(text, i, "unescaped '}' in constructor content")
            elif ch == "&":
                value, i = self._read_entity(i)
                literal.append(value)
            elif ch == "<":
                if text.startswith("</", i):
                    close, j = self._read_raw_name(i + 2)
                    j = self._skip_raw_space(j)
                    if not text.startswith(">", j):
                        raise error_at(text, j, "malformed closing tag")
                    if local_name(close) != local_name(name):
                        raise error_at(
                            text, i, f"mismatched closing tag </{close}> for <{name}>"
                        )
                    flush()
                    self.pos = j + 1
                    return ast.ElemConstructor(local_name(name), tuple(content))
                if _name_start(text[i + 1 : i + 2] or " "):
                    flush()
                    self.pos = i
                    content.append(self._parse_constructor())
                    i = self.pos
                else:
                    raise error_at(text, i, "unescaped '<' in constructor content")
            else:
                literal.append(ch)
                i += 1

    def _read_raw_name(self, i: int) -> tuple[str, int]:
        text = self.text
        start = i
        if i >= len(text) or not _name_start(text[i]):
            raise error_at(text, i, "expected a name")
        i += 1
        while i < len(text) and (text[i].isalnum() or text[i] in "_-.:"):
            i += 1
        return text[start:i], i

    def _skip_raw_space(self, i: int) -> int:
        while i < len(self.text) and self.text[i].isspace():
            i += 1
        return i

    def _read_entity(self, i: int) -> tuple[str, int]:
        text = self.text
        end = text.find(";", i + 1, i + 12)
        if end < 0:
            raise error_at(text, i, "malformed entity reference")
        body = text[i + 1 : end]
        if body.startswith("#x") or body.startswith("#X"):
            return chr(int(body[2:], 16)), end + 1
        if body.startswith("#"):
            return chr(int(body[1:])), end + 1
        if body in _ENTITIES:
            return _ENTITIES[body], end + 1
        raise error_at(text, i, f"unknown entity &{body};")


def parse_expression(text: str, *, updating: bool = True) -> ast.Expr:
    """Parse a complete expression; raises ParseError on trailing input."""
    parser = ExprParser(text)
    expr = parser.parse_expr()
    tok = parser.peek()
    if tok.kind != EOF:
        raise parser.error("unexpected input after expression", tok)
    ast.check_updating_placement(expr, updating)
    return expr
