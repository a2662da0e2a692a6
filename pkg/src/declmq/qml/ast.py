"""Expression syntax trees and their canonical text rendering.

Nodes are frozen dataclasses so parsed programs compare structurally; the
renderer emits text that parses back to an equal tree. Rendering is
conservative with parentheses (nested sequences and conditionals are always
wrapped) because ``then``/``else``/``return`` bodies parse greedy comma
sequences.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal

from ..errors import StaticError

# axis names used by PathStep
CHILD = "child"
ATTRIBUTE = "attribute"
DESCEND = "descendant-or-self"
FILTER = "filter"


@dataclass(frozen=True)
class StringLit:
    value: str


@dataclass(frozen=True)
class IntLit:
    value: int


@dataclass(frozen=True)
class DecLit:
    value: Decimal


@dataclass(frozen=True)
class EmptySeq:
    pass


@dataclass(frozen=True)
class VarRef:
    name: str


@dataclass(frozen=True)
class SequenceExpr:
    items: tuple


@dataclass(frozen=True)
class LetExpr:
    var: str
    value: "Expr"
    body: "Expr"


@dataclass(frozen=True)
class ForExpr:
    var: str
    domain: "Expr"
    where: "Expr | None"
    body: "Expr"


@dataclass(frozen=True)
class IfExpr:
    cond: "Expr"
    then: "Expr"
    orelse: "Expr | None"  # None means the empty sequence / no updates


@dataclass(frozen=True)
class AndExpr:
    items: tuple


@dataclass(frozen=True)
class OrExpr:
    items: tuple


@dataclass(frozen=True)
class ComparisonExpr:
    op: str  # = != < <= > >=
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class FnCall:
    name: str  # as written, e.g. "qs:message" or "count"
    args: tuple


@dataclass(frozen=True)
class PathStep:
    axis: str
    test: str | None  # name test or "*"; None for descendant-or-self/filter
    predicates: tuple = ()


@dataclass(frozen=True)
class PathExpr:
    source: "Expr | None"  # None: context item (relative) or document root
    absolute: bool
    steps: tuple


@dataclass(frozen=True)
class TextItem:
    content: str


@dataclass(frozen=True)
class EnclosedExpr:
    expr: "Expr"


@dataclass(frozen=True)
class ElemConstructor:
    name: str
    content: tuple  # TextItem | ElemConstructor | EnclosedExpr


@dataclass(frozen=True)
class DoEnqueue:
    body: "Expr"
    queue: str
    with_clauses: tuple  # of (property name, Expr)


@dataclass(frozen=True)
class DoReset:
    slicing: str | None
    key: "Expr | None"


Expr = (
    StringLit
    | IntLit
    | DecLit
    | EmptySeq
    | VarRef
    | SequenceExpr
    | LetExpr
    | ForExpr
    | IfExpr
    | AndExpr
    | OrExpr
    | ComparisonExpr
    | FnCall
    | PathExpr
    | ElemConstructor
    | DoEnqueue
    | DoReset
)


def check_updating_placement(expr: Expr, updating: bool = True) -> None:
    """Reject ``do`` forms outside updating positions.

    Updating positions are the expression itself, conditional branches,
    let/for bodies and sequence items; operands, predicates, arguments and
    constructor content are not.
    """
    if isinstance(expr, (DoEnqueue, DoReset)):
        if not updating:
            raise StaticError("updating expression in a non-updating position")
        if isinstance(expr, DoEnqueue):
            check_updating_placement(expr.body, False)
            for _, value in expr.with_clauses:
                check_updating_placement(value, False)
        elif expr.key is not None:
            check_updating_placement(expr.key, False)
        return
    if isinstance(expr, SequenceExpr):
        for item in expr.items:
            check_updating_placement(item, updating)
    elif isinstance(expr, IfExpr):
        check_updating_placement(expr.cond, False)
        check_updating_placement(expr.then, updating)
        if expr.orelse is not None:
            check_updating_placement(expr.orelse, updating)
    elif isinstance(expr, LetExpr):
        check_updating_placement(expr.value, False)
        check_updating_placement(expr.body, updating)
    elif isinstance(expr, ForExpr):
        check_updating_placement(expr.domain, False)
        if expr.where is not None:
            check_updating_placement(expr.where, False)
        check_updating_placement(expr.body, updating)
    elif isinstance(expr, (AndExpr, OrExpr)):
        for item in expr.items:
            check_updating_placement(item, False)
    elif isinstance(expr, ComparisonExpr):
        check_updating_placement(expr.left, False)
        check_updating_placement(expr.right, False)
    elif isinstance(expr, FnCall):
        for arg in expr.args:
            check_updating_placement(arg, False)
    elif isinstance(expr, PathExpr):
        if expr.source is not None:
            check_updating_placement(expr.source, False)
        for step in expr.steps:
            for pred in step.predicates:
                check_updating_placement(pred, False)
    elif isinstance(expr, ElemConstructor):
        for item in expr.content:
            if isinstance(item, EnclosedExpr):
                check_updating_placement(item.expr, False)
            elif isinstance(item, ElemConstructor):
                check_updating_placement(item, False)


# precedence levels for rendering
_SEQ, _SINGLE, _OR, _AND, _CMP, _PATH, _PRIMARY = range(7)


def _level(expr: Expr) -> int:
    if isinstance(expr, SequenceExpr):
        return _SEQ
    if isinstance(expr, (IfExpr, LetExpr, ForExpr, DoEnqueue, DoReset)):
        return _SINGLE
    if isinstance(expr, OrExpr):
        return _OR
    if isinstance(expr, AndExpr):
        return _AND
    if isinstance(expr, ComparisonExpr):
        return _CMP
    if isinstance(expr, PathExpr):
        return _PATH
    return _PRIMARY


def render_expression(expr: Expr) -> str:
    return _render(expr, _SEQ)


def _render(expr: Expr, min_level: int) -> str:
    text = _render_inner(expr)
    if _level(expr) < min_level:
        return f"({text})"
    return text


def _escape_constructor_text(value: str) -> str:
    return (
        value.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace("{", "{{")
        .replace("}", "}}")
    )


def _render_string(value: str) -> str:
    return '"' + value.replace('"', '""') + '"'


def _render_steps(steps: tuple, lead: str) -> str:
    out: list[str] = []
    sep = lead
    for step in steps:
        if step.axis == DESCEND:
            sep = "//"
            continue
        if step.axis == FILTER:
            pass
        else:
            out.append(sep)
            if step.axis == ATTRIBUTE:
                out.append("@")
            out.append(step.test)
        for pred in step.predicates:
            out.append(f"[{_render(pred, _SEQ)}]")
        sep = "/"
    return "".join(out)


def _render_inner(expr: Expr) -> str:
    if isinstance(expr, StringLit):
        return _render_string(expr.value)
    if isinstance(expr, IntLit):
        return str(expr.value)
    if isinstance(expr, DecLit):
        return str(expr.value)
    if isinstance(expr, EmptySeq):
        return "()"
    if isinstance(expr, VarRef):
        return f"${expr.name}"
    if isinstance(expr, SequenceExpr):
        parts = []
        for index, item in enumerate(expr.items):
            text = _render(item, _SINGLE)
            if index < len(expr.items) - 1 and _greedy_tail(item):
                text = f"({text})"
            parts.append(text)
        return ", ".join(parts)
    if isinstance(expr, LetExpr):
        return (
            f"let ${expr.var} := {_render(expr.value, _SINGLE)} "
            f"return {_render_body(expr.body)}"
        )
    if isinstance(expr, ForExpr):
        where = (
            f" where {_render(expr.where, _OR)}" if expr.where is not None else ""
        )
        return (
            f"for ${expr.var} in {_render(expr.domain, _SINGLE)}{where} "
            f"return {_render_body(expr.body)}"
        )
    if isinstance(expr, IfExpr):
        then = _render_body(expr.then)
        if expr.orelse is not None and _dangling_if(expr.then):
            then = f"({then})"
        text = f"if ({_render(expr.cond, _SEQ)}) then {then}"
        if expr.orelse is not None:
            text += f" else {_render_body(expr.orelse)}"
        return text
    if isinstance(expr, OrExpr):
        return " or ".join(_render(item, _AND) for item in expr.items)
    if isinstance(expr, AndExpr):
        return " and ".join(_render(item, _CMP) for item in expr.items)
    if isinstance(expr, ComparisonExpr):
        return (
            f"{_render(expr.left, _PATH)} {expr.op} {_render(expr.right, _PATH)}"
        )
    if isinstance(expr, FnCall):
        args = ", ".join(_render(arg, _SINGLE) for arg in expr.args)
        return f"{expr.name}({args})"
    if isinstance(expr, PathExpr):
        if expr.source is not None:
            return _render(expr.source, _PRIMARY) + _render_steps(expr.steps, "/")
        if expr.absolute:
            return _render_steps(expr.steps, "/") or "/"
        return _render_steps(expr.steps, "")
    if isinstance(expr, ElemConstructor):
        if not expr.content:
            return f"<{expr.name}/>"
        parts = [f"<{expr.name}>"]
        for item in expr.content:
            if isinstance(item, TextItem):
                parts.append(_escape_constructor_text(item.content))
            elif isinstance(item, EnclosedExpr):
                parts.append("{" + _render(item.expr, _SEQ) + "}")
            else:
                parts.append(_render_inner(item))
        parts.append(f"</{expr.name}>")
        return "".join(parts)
    if isinstance(expr, DoEnqueue):
        text = f"do enqueue {_render(expr.body, _SINGLE)} into {expr.queue}"
        for name, value in expr.with_clauses:
            text += f" with {name} value {_render(value, _SINGLE)}"
        return text
    if isinstance(expr, DoReset):
        if expr.slicing is None:
            return "do reset"
        return f"do reset {expr.slicing} key {_render(expr.key, _SINGLE)}"
    raise TypeError(f"not an expression node: {expr!r}")


def _render_body(expr: Expr) -> str:
    """Bodies of then/else/return: sequences are safe (greedy parse) but we
    still render them at single-expression level for unambiguity."""
    return _render(expr, _SINGLE)


def _greedy_tail(expr: Expr) -> bool:
    # then/else/return bodies parse greedy comma sequences, so these
    # constructs swallow a following comma unless parenthesized
    return isinstance(expr, (IfExpr, LetExpr, ForExpr))


def _dangling_if(expr: Expr) -> bool:
    # would an `else` after this text bind to a nested if?
    if isinstance(expr, IfExpr):
        return expr.orelse is None or _dangling_if(expr.orelse)
    if isinstance(expr, (LetExpr, ForExpr)):
        return _dangling_if(expr.body)
    return False
