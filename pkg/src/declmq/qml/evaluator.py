"""Expression evaluation.

Evaluation is read-only with respect to the store: all reads go through the
snapshot captured in the :class:`EvalContext`, and the updating forms do not
apply anything, they emit :class:`EnqueueUpdate` / :class:`ResetUpdate`
records in left-to-right evaluation order for the caller to apply later.
Given equal context and snapshot, evaluation is deterministic.

Value sequences are plain Python lists whose items are tree nodes or atomic
values (str, bool, int, Decimal, datetime).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from decimal import Decimal

from .. import xmltree
from ..errors import DynamicError, UnknownQueue, UnknownSlicing
from . import ast
from .lexer import local_name


@dataclass(frozen=True)
class EnqueueUpdate:
    queue: str
    body: xmltree.Document
    explicit: tuple  # of (property name, atomic value)
    rule: str | None = None  # engine fills this in when applying


@dataclass(frozen=True)
class ResetUpdate:
    slicing: str
    key: object
    rule: str | None = None


PendingUpdate = EnqueueUpdate | ResetUpdate


@dataclass(frozen=True)
class EvalContext:
    """Everything an expression may observe.

    ``message`` is the triggering message (anything with ``body``, ``props``
    and ``queue``); ``snapshot`` must offer ``read_queue(name)`` and
    ``read_slice(slicing, key)`` returning message-like objects in enqueue
    order. ``known_properties`` is the set of resolvable property names, or
    None to skip the check in standalone evaluation.
    """

    message: object | None = None
    snapshot: object | None = None
    rule_target_kind: str | None = None  # "queue" | "slicing" | None
    rule_target_name: str | None = None
    slice_key: object | None = None
    variables: dict = field(default_factory=dict)
    clock: object | None = None
    known_properties: frozenset | None = None
    context_item: object | None = None

    def with_context(self, item) -> "EvalContext":
        return replace(self, context_item=item)

    def with_var(self, name: str, value: list) -> "EvalContext":
        return replace(self, variables={**self.variables, name: value})


def evaluate(expr: ast.Expr, ctx: EvalContext) -> tuple[list, list]:
    """Evaluate ``expr`` and return (value sequence, pending updates)."""
    updates: list[PendingUpdate] = []
    value = _eval(expr, ctx, updates)
    return value, updates


def eval_path(path: ast.PathExpr, context_item, ctx: EvalContext) -> list:
    """Evaluate a path against an explicit context node."""
    return _eval_path(path, ctx.with_context(context_item), [])


def effective_boolean(items: list) -> bool:
    if not items:
        return False
    if xmltree.is_node(items[0]):
        return True
    if len(items) > 1:
        raise DynamicError("type-error", "sequence of atomics has no boolean value")
    value = items[0]
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        return bool(value)
    if isinstance(value, (int, Decimal)):
        return value != 0
    raise DynamicError("type-error", f"no boolean value for {type(value).__name__}")


def atomize(items: list) -> list:
    return [
        xmltree.string_value(item) if xmltree.is_node(item) else item
        for item in items
    ]


def format_atomic(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value
    if isinstance(value, (int, Decimal)):
        return str(value)
    if isinstance(value, datetime):
        return value.isoformat()
    raise DynamicError("type-error", f"cannot format {type(value).__name__}")


_NUMBER_RE = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)$")


def _as_number(value) -> Decimal | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return Decimal(value)
    if isinstance(value, Decimal):
        return value
    if isinstance(value, str) and _NUMBER_RE.match(value.strip()):
        return Decimal(value.strip())
    return None


def _apply_op(op: str, x, y) -> bool:
    if op == "=":
        return x == y
    if op == "!=":
        return x != y
    if op == "<":
        return x < y
    if op == "<=":
        return x <= y
    if op == ">":
        return x > y
    return x >= y


def compare_atoms(op: str, x, y) -> bool:
    """Compare two atomic values under the subset's coercion rules.

    Booleans compare only with booleans and only for (in)equality. Numbers
    and numeric strings compare numerically when the pair is mixed; two
    strings always compare as strings. dateTime compares with dateTime, or
    as ISO text against a string.
    """
    if isinstance(x, bool) or isinstance(y, bool):
        if isinstance(x, bool) and isinstance(y, bool) and op in ("=", "!="):
            return _apply_op(op, x, y)
        raise DynamicError("type-error", f"cannot compare booleans with {op!r} here")
    if isinstance(x, datetime) or isinstance(y, datetime):
        if isinstance(x, datetime) and isinstance(y, datetime):
            return _apply_op(op, x, y)
        if isinstance(x, datetime) and isinstance(y, str):
            return _apply_op(op, x.isoformat(), y)
        if isinstance(x, str) and isinstance(y, datetime):
            return _apply_op(op, x, y.isoformat())
        raise DynamicError("type-error", "cannot compare dateTime with a number")
    x_num = isinstance(x, (int, Decimal))
    y_num = isinstance(y, (int, Decimal))
    if x_num and y_num:
        return _apply_op(op, Decimal(x), Decimal(y))
    if x_num != y_num:
        nx, ny = _as_number(x), _as_number(y)
        if nx is not None and ny is not None:
            return _apply_op(op, nx, ny)
        return _apply_op(op, format_atomic(x), format_atomic(y))
    return _apply_op(op, x, y)


def general_compare(op: str, left: list, right: list) -> bool:
    """Existential comparison over the atomized operands."""
    left = atomize(left)
    right = atomize(right)
    for x in left:
        for y in right:
            if compare_atoms(op, x, y):
                return True
    return False


def _eval(expr: ast.Expr, ctx: EvalContext, updates: list) -> list:
    if isinstance(expr, ast.StringLit):
        return [expr.value]
    if isinstance(expr, ast.IntLit):
        return [expr.value]
    if isinstance(expr, ast.DecLit):
        return [expr.value]
    if isinstance(expr, ast.EmptySeq):
        return []
    if isinstance(expr, ast.VarRef):
        try:
            return ctx.variables[expr.name]
        except KeyError:
            raise DynamicError("unbound-variable", f"${expr.name}") from None
    if isinstance(expr, ast.SequenceExpr):
        out: list = []
        for item in expr.items:
            out.extend(_eval(item, ctx, updates))
        return out
    if isinstance(expr, ast.LetExpr):
        value = _eval(expr.value, ctx, updates)
        return _eval(expr.body, ctx.with_var(expr.var, value), updates)
    if isinstance(expr, ast.ForExpr):
        out = []
        for item in _eval(expr.domain, ctx, updates):
            bound = ctx.with_var(expr.var, [item])
            if expr.where is not None:
                if not effective_boolean(_eval(expr.where, bound, updates)):
                    continue
            out.extend(_eval(expr.body, bound, updates))
        return out
    if isinstance(expr, ast.IfExpr):
        if effective_boolean(_eval(expr.cond, ctx, updates)):
            return _eval(expr.then, ctx, updates)
        if expr.orelse is not None:
            return _eval(expr.orelse, ctx, updates)
        return []
    if isinstance(expr, ast.AndExpr):
        for item in expr.items:
            if not effective_boolean(_eval(item, ctx, updates)):
                return [False]
        return [True]
    if isinstance(expr, ast.OrExpr):
        for item in expr.items:
            if effective_boolean(_eval(item, ctx, updates)):
                return [True]
        return [False]
    if isinstance(expr, ast.ComparisonExpr):
        left = _eval(expr.left, ctx, updates)
        right = _eval(expr.right, ctx, updates)
        return [general_compare(expr.op, left, right)]
    if isinstance(expr, ast.FnCall):
        args = [_eval(arg, ctx, updates) for arg in expr.args]
        return builtin_call(expr.name, args, ctx)
    if isinstance(expr, ast.PathExpr):
        return _eval_path(expr, ctx, updates)
    if isinstance(expr, ast.ElemConstructor):
        root = _build_constructor(expr, ctx, updates)
        return [xmltree.make_document(root).root]
    if isinstance(expr, ast.DoEnqueue):
        return _eval_enqueue(expr, ctx, updates)
    if isinstance(expr, ast.DoReset):
        return _eval_reset(expr, ctx, updates)
    raise TypeError(f"not an expression node: {expr!r}")


def _eval_enqueue(expr: ast.DoEnqueue, ctx: EvalContext, updates: list) -> list:
    items = _eval(expr.body, ctx, updates)
    if len(items) != 1 or not isinstance(
        items[0], (xmltree.Element, xmltree.Document)
    ):
        raise DynamicError(
            "enqueue-body", "enqueued content must be a single element"
        )
    body = xmltree.make_document(xmltree.copy_node(items[0]))
    explicit = []
    for name, value_expr in expr.with_clauses:
        values = atomize(_eval(value_expr, ctx, updates))
        if len(values) > 1:
            raise DynamicError(
                "type-error", f"property {name} value is not a single item"
            )
        if values:
            explicit.append((name, values[0]))
    updates.append(EnqueueUpdate(expr.queue, body, tuple(explicit)))
    return []


def _eval_reset(expr: ast.DoReset, ctx: EvalContext, updates: list) -> list:
    if expr.slicing is not None:
        keys = atomize(_eval(expr.key, ctx, updates))
        if len(keys) != 1:
            raise DynamicError("type-error", "slice key must be a single value")
        updates.append(ResetUpdate(expr.slicing, keys[0]))
        return []
    if ctx.rule_target_kind != "slicing":
        raise DynamicError(
            "slice-context", "bare 'do reset' is only valid in a slicing rule"
        )
    updates.append(ResetUpdate(ctx.rule_target_name, ctx.slice_key))
    return []


def _build_constructor(expr: ast.ElemConstructor, ctx: EvalContext, updates: list):
    children: list = []
    for item in expr.content:
        if isinstance(item, ast.TextItem):
            children.append(xmltree.text(item.content))
        elif isinstance(item, ast.ElemConstructor):
            children.append(_build_constructor(item, ctx, updates))
        else:
            values = _eval(item.expr, ctx, updates)
            pending_text: list[str] = []
            for value in values:
                if isinstance(value, (xmltree.Element, xmltree.Document, xmltree.Text)):
                    if pending_text:
                        children.append(xmltree.text(" ".join(pending_text)))
                        pending_text = []
                    children.append(xmltree.copy_node(value))
                else:
                    if isinstance(value, xmltree.Attribute):
                        value = value.value
                    pending_text.append(format_atomic(value))
            if pending_text:
                children.append(xmltree.text(" ".join(pending_text)))
    return xmltree.element(expr.name, (), children)


# paths


def _context_node(ctx: EvalContext):
    item = ctx.context_item
    if item is None and ctx.message is not None:
        item = ctx.message.body
    if item is None:
        raise DynamicError("context", "no context item for path evaluation")
    return item


def _eval_path(expr: ast.PathExpr, ctx: EvalContext, updates: list) -> list:
    if expr.source is not None:
        current = _eval(expr.source, ctx, updates)
    else:
        node = _context_node(ctx)
        if not xmltree.is_node(node):
            raise DynamicError("type-error", "path applied to an atomic value")
        current = [node.doc] if expr.absolute else [node]
    for step in expr.steps:
        current = _eval_step(step, current, ctx, updates)
    return current


def _require_nodes(items: list) -> list:
    for item in items:
        if not xmltree.is_node(item):
            raise DynamicError("type-error", "path step over an atomic value")
    return items


def _ordered_union(groups: list[list]) -> list:
    seen: set[int] = set()
    merged = []
    for group in groups:
        for node in group:
            if id(node) not in seen:
                seen.add(id(node))
                merged.append(node)
    merged.sort(key=xmltree.document_order_key)
    return merged


def _descendants_or_self(node) -> list:
    out = [node]

    def walk(n):
        for child in getattr(n, "children", ()):
            if isinstance(child, xmltree.Element):
                out.append(child)
                walk(child)

    walk(node)
    return out


def _axis_candidates(node, step: ast.PathStep) -> list:
    if step.axis == ast.CHILD:
        return [
            child
            for child in getattr(node, "children", ())
            if isinstance(child, xmltree.Element)
            and (step.test == "*" or child.name == step.test)
        ]
    if step.axis == ast.ATTRIBUTE:
        return [
            attr
            for attr in getattr(node, "attributes", ())
            if step.test == "*" or attr.name == step.test
        ]
    raise TypeError(step.axis)


def _eval_step(step: ast.PathStep, current: list, ctx: EvalContext, updates: list):
    if step.axis == ast.FILTER:
        result = current
        for pred in step.predicates:
            result = _filter(result, pred, ctx, updates)
        return result
    _require_nodes(current)
    if step.axis == ast.DESCEND:
        return _ordered_union([_descendants_or_self(n) for n in current])
    groups = []
    for node in current:
        selected = _axis_candidates(node, step)
        for pred in step.predicates:
            selected = _filter(selected, pred, ctx, updates)
        groups.append(selected)
    return _ordered_union(groups)


def _filter(items: list, predicate: ast.Expr, ctx: EvalContext, updates: list):
    kept = []
    for position, item in enumerate(items, start=1):
        result = _eval(predicate, ctx.with_context(item), updates)
        if (
            len(result) == 1
            and isinstance(result[0], (int, Decimal))
            and not isinstance(result[0], bool)
        ):
            if result[0] == position:
                kept.append(item)
        elif effective_boolean(result):
            kept.append(item)
    return kept


# builtin functions

BUILTIN_ARITIES = {
    "qs:message": (0,),
    "qs:queue": (0, 1),
    "qs:property": (1,),
    "qs:slice": (0,),
    "qs:slicekey": (0,),
    "collection": (1,),
    "not": (1,),
    "count": (1,),
    "string": (1,),
    "exists": (1,),
    "true": (0,),
    "false": (0,),
}


def _single_string(args: list, what: str) -> str:
    values = atomize(args)
    if len(values) != 1 or not isinstance(values[0], str):
        raise DynamicError("type-error", f"{what} must be a single string")
    return values[0]


def builtin_call(name: str, args: list[list], ctx: EvalContext) -> list:
    """Dispatch a function call. ``args`` holds evaluated argument sequences."""
    if name.startswith("fn:"):
        name = local_name(name)
    if name not in BUILTIN_ARITIES:
        raise DynamicError("unknown-function", name)
    if len(args) not in BUILTIN_ARITIES[name]:
        raise DynamicError(
            "arity", f"{name} does not take {len(args)} argument(s)"
        )
    if name == "true":
        return [True]
    if name == "false":
        return [False]
    if name == "not":
        return [not effective_boolean(args[0])]
    if name == "count":
        return [len(args[0])]
    if name == "exists":
        return [bool(args[0])]
    if name == "string":
        values = args[0]
        if not values:
            return [""]
        if len(values) > 1:
            raise DynamicError("type-error", "string() of a multi-item sequence")
        value = values[0]
        if xmltree.is_node(value):
            return [xmltree.string_value(value)]
        return [format_atomic(value)]
    if name == "qs:message":
        if ctx.message is None:
            raise DynamicError("context", "no current message")
        return [ctx.message.body]
    if name in ("qs:queue", "collection"):
        if not args:
            if ctx.rule_target_kind != "queue" or ctx.rule_target_name is None:
                raise DynamicError(
                    "queue-context",
                    "zero-argument qs:queue() is only valid in a queue rule",
                )
            queue = ctx.rule_target_name
        else:
            queue = _single_string(args[0], "queue name")
        if ctx.snapshot is None:
            raise DynamicError("context", "no snapshot to read queues from")
        try:
            messages = ctx.snapshot.read_queue(queue)
        except UnknownQueue:
            raise DynamicError("unknown-queue", queue) from None
        return [m.body for m in messages]
    if name == "qs:property":
        prop = _single_string(args[0], "property name")
        if ctx.known_properties is not None and prop not in ctx.known_properties:
            raise DynamicError("undefined-property", prop)
        if ctx.message is None:
            raise DynamicError("context", "no current message")
        value = ctx.message.props.get(prop)
        return [] if value is None else [value]
    if name == "qs:slice":
        if ctx.rule_target_kind != "slicing":
            raise DynamicError(
                "slice-context", "qs:slice() is only valid in a slicing rule"
            )
        if ctx.snapshot is None:
            raise DynamicError("context", "no snapshot to read slices from")
        try:
            messages = ctx.snapshot.read_slice(ctx.rule_target_name, ctx.slice_key)
        except UnknownSlicing:
            raise DynamicError("unknown-queue", str(ctx.rule_target_name)) from None
        return [m.body for m in messages]
    if name == "qs:slicekey":
        if ctx.rule_target_kind != "slicing":
            raise DynamicError(
                "slice-context", "qs:slicekey() is only valid in a slicing rule"
            )
        return [ctx.slice_key]
    raise DynamicError("unknown-function", name)
