"""Application definition language.

An application file is a sequence of ``create queue``, ``create property``,
``create slicing`` and ``create rule`` statements. Parsing produces an
:class:`ApplicationDef`; validation returns diagnostics instead of raising so
a deploy can report everything wrong at once; rendering emits canonical text
that parses back to an equal definition.

Clause notes:
  * ``mode`` defaults to ``persistent`` when omitted.
  * ``interface X port Y``, ``using X policy Y`` and ``conform to X`` are
    accepted and kept as opaque annotations; they do not affect execution.
  * property value clauses accept either a bare constant (string, number,
    ``true``/``false``) or an expression evaluated against the new message.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from enum import Enum
from functools import cached_property

from .errors import PropertyValueError, UnknownKeyword
from .qml import ast
from .qml.ast import check_updating_placement, render_expression
from .qml.lexer import EOF, INTEGER, NAME, STRING, DECIMAL, local_name
from .qml.parser import ExprParser


class QueueKind(str, Enum):
    BASIC = "basic"
    INCOMING_GATEWAY = "incomingGateway"
    OUTGOING_GATEWAY = "outgoingGateway"
    ECHO = "echo"


class QueueMode(str, Enum):
    PERSISTENT = "persistent"
    TRANSIENT = "transient"


class ValueType(str, Enum):
    STRING = "string"
    BOOLEAN = "boolean"
    INTEGER = "integer"
    DECIMAL = "decimal"
    DATETIME = "dateTime"


GATEWAY_KINDS = (QueueKind.INCOMING_GATEWAY, QueueKind.OUTGOING_GATEWAY)


@dataclass(frozen=True)
class QueueDescriptor:
    name: str
    kind: QueueKind
    mode: QueueMode = QueueMode.PERSISTENT
    priority: int = 0
    endpoint: str | None = None
    errorqueue: str | None = None
    annotations: tuple = ()


@dataclass(frozen=True)
class PropertyClause:
    queues: tuple
    value: object  # Expr or a constant (str, bool, int, Decimal)


@dataclass(frozen=True)
class PropertyDef:
    name: str
    value_type: ValueType
    fixed: bool = False
    inherited: bool = False
    clauses: tuple = ()

    def clause_for(self, queue: str) -> PropertyClause | None:
        for clause in self.clauses:
            if queue in clause.queues:
                return clause
        return None


@dataclass(frozen=True)
class SlicingDef:
    name: str
    property_name: str


@dataclass(frozen=True)
class RuleDef:
    name: str
    target: str
    target_kind: str  # "queue" | "slicing"
    body: object
    errorqueue: str | None = None


@dataclass(frozen=True)
class ApplicationDef:
    queues: tuple = ()
    properties: tuple = ()
    slicings: tuple = ()
    rules: tuple = ()

    @cached_property
    def queue_map(self) -> dict:
        return {q.name: q for q in self.queues}

    @cached_property
    def property_map(self) -> dict:
        return {p.name: p for p in self.properties}

    @cached_property
    def slicing_map(self) -> dict:
        return {s.name: s for s in self.slicings}

    def slicings_on_property(self, property_name: str) -> list:
        return [s for s in self.slicings if s.property_name == property_name]


@dataclass(frozen=True)
class Diagnostic:
    code: str
    subject: str
    message: str

    def __str__(self):
        return f"{self.code} ({self.subject}): {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    diagnostics: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.diagnostics


_QUEUE_KINDS = {k.value: k for k in QueueKind}
_QUEUE_MODES = {m.value: m for m in QueueMode}
_VALUE_TYPES = {t.value: t for t in ValueType}


class _AppParser:
    def __init__(self, text: str):
        self.cursor = ExprParser(text)

    def parse(self) -> ApplicationDef:
        queues, properties, slicings, rules = [], [], [], []
        pending_rules = []
        cur = self.cursor
        while cur.peek().kind != EOF:
            cur.expect_keyword("create")
            what = cur.expect(NAME)
            if what.value == "queue":
                queues.append(self._parse_queue())
            elif what.value == "property":
                properties.append(self._parse_property())
            elif what.value == "slicing":
                slicings.append(self._parse_slicing())
            elif what.value == "rule":
                pending_rules.append(self._parse_rule())
            else:
                raise UnknownKeyword(
                    f"unknown statement 'create {what.value}'",
                    *self._pos(what),
                    what.value,
                )
        queue_names = {q.name for q in queues}
        slicing_names = {s.name for s in slicings}
        for name, target, errorqueue, body in pending_rules:
            kind = "slicing" if target in slicing_names else "queue"
            if target not in slicing_names and target not in queue_names:
                kind = "queue"  # validation will flag the unresolved name
            rules.append(RuleDef(name, target, kind, body, errorqueue))
        return ApplicationDef(
            tuple(queues), tuple(properties), tuple(slicings), tuple(rules)
        )

    def _pos(self, tok):
        from .qml.lexer import line_col

        return line_col(self.cursor.text, tok.start)

    def _name(self) -> str:
        return local_name(self.cursor.expect(NAME).value)

    def _parse_queue(self) -> QueueDescriptor:
        cur = self.cursor
        name = self._name()
        kind = None
        mode = QueueMode.PERSISTENT
        priority = 0
        endpoint = None
        errorqueue = None
        annotations = []
        while True:
            tok = cur.peek()
            if tok.kind != NAME:
                break
            word = tok.value
            if word == "kind":
                cur.advance()
                value = cur.expect(NAME)
                if value.value not in _QUEUE_KINDS:
                    raise UnknownKeyword(
                        f"unknown queue kind {value.value!r}",
                        *self._pos(value),
                        value.value,
                    )
                kind = _QUEUE_KINDS[value.value]
            elif word == "mode":
                cur.advance()
                value = cur.expect(NAME)
                if value.value not in _QUEUE_MODES:
                    raise UnknownKeyword(
                        f"unknown queue mode {value.value!r}",
                        *self._pos(value),
                        value.value,
                    )
                mode = _QUEUE_MODES[value.value]
            elif word == "priority":
                cur.advance()
                priority = int(cur.expect(INTEGER).value)
            elif word == "errorqueue":
                cur.advance()
                errorqueue = self._name()
            elif word == "endpoint":
                cur.advance()
                endpoint = cur.expect(STRING).value
            elif word == "conform":
                cur.advance()
                cur.expect_keyword("to")
                tok = cur.peek()
                if tok.kind not in (NAME, STRING):
                    raise cur.error("expected a schema reference after 'conform to'")
                cur.advance()
                annotations.append(("conform", tok.value))
            elif word == "interface":
                cur.advance()
                iface = self._name()
                cur.expect_keyword("port")
                annotations.append(("interface", iface, self._name()))
            elif word == "using":
                cur.advance()
                extension = self._name()
                cur.expect_keyword("policy")
                annotations.append(("using", extension, self._name()))
            else:
                break
        if kind is None:
            raise cur.error(f"queue {name!r} is missing a 'kind' clause")
        return QueueDescriptor(
            name, kind, mode, priority, endpoint, errorqueue, tuple(annotations)
        )

    def _parse_property(self) -> PropertyDef:
        cur = self.cursor
        name = self._name()
        cur.expect_keyword("as")
        type_tok = cur.expect(NAME)
        type_name = local_name(type_tok.value)
        if type_name not in _VALUE_TYPES:
            raise UnknownKeyword(
                f"unknown value type {type_tok.value!r}",
                *self._pos(type_tok),
                type_tok.value,
            )
        value_type = _VALUE_TYPES[type_name]
        fixed = False
        inherited = False
        while cur.peek().kind == NAME and cur.peek().value in ("fixed", "inherited"):
            word = cur.advance().value
            if word == "fixed":
                fixed = True
            else:
                inherited = True
        clauses = []
        while cur.at_keyword("queue"):
            cur.advance()
            queue_names = [self._name()]
            while cur.peek().kind == ",":
                cur.advance()
                queue_names.append(self._name())
            cur.expect_keyword("value")
            clauses.append(PropertyClause(tuple(queue_names), self._parse_value()))
        return PropertyDef(name, value_type, fixed, inherited, tuple(clauses))

    def _parse_value(self):
        cur = self.cursor
        tok = cur.peek()
        if tok.kind == STRING:
            cur.advance()
            return tok.value
        if tok.kind == INTEGER:
            cur.advance()
            return int(tok.value)
        if tok.kind == DECIMAL:
            cur.advance()
            return Decimal(tok.value)
        if (
            tok.kind == NAME
            and tok.value in ("true", "false")
            and cur.after(tok).kind != "("
        ):
            cur.advance()
            return tok.value == "true"
        expr = cur.parse_expr_single()
        check_updating_placement(expr, False)
        return expr

    def _parse_slicing(self) -> SlicingDef:
        name = self._name()
        self.cursor.expect_keyword("on")
        return SlicingDef(name, self._name())

    def _parse_rule(self):
        cur = self.cursor
        name = self._name()
        cur.expect_keyword("for")
        target = self._name()
        errorqueue = None
        if cur.at_keyword("errorqueue"):
            cur.advance()
            errorqueue = self._name()
        body = cur.parse_expr()
        check_updating_placement(body, True)
        return (name, target, errorqueue, body)


def parse_application(text: str) -> ApplicationDef:
    """Parse application text. Raises ParseError/UnknownKeyword on bad input."""
    return _AppParser(text).parse()


def _walk_expr(expr):
    yield expr
    if isinstance(expr, ast.SequenceExpr):
        for item in expr.items:
            yield from _walk_expr(item)
    elif isinstance(expr, ast.LetExpr):
        yield from _walk_expr(expr.value)
        yield from _walk_expr(expr.body)
    elif isinstance(expr, ast.ForExpr):
        yield from _walk_expr(expr.domain)
        if expr.where is not None:
            yield from _walk_expr(expr.where)
        yield from _walk_expr(expr.body)
    elif isinstance(expr, ast.IfExpr):
        yield from _walk_expr(expr.cond)
        yield from _walk_expr(expr.then)
        if expr.orelse is not None:
            yield from _walk_expr(expr.orelse)
    elif isinstance(expr, (ast.AndExpr, ast.OrExpr)):
        for item in expr.items:
            yield from _walk_expr(item)
    elif isinstance(expr, ast.ComparisonExpr):
        yield from _walk_expr(expr.left)
        yield from _walk_expr(expr.right)
    elif isinstance(expr, ast.FnCall):
        for arg in expr.args:
            yield from _walk_expr(arg)
    elif isinstance(expr, ast.PathExpr):
        if expr.source is not None:
            yield from _walk_expr(expr.source)
        for step in expr.steps:
            for pred in step.predicates:
                yield from _walk_expr(pred)
    elif isinstance(expr, ast.ElemConstructor):
        for item in expr.content:
            if isinstance(item, ast.EnclosedExpr):
                yield from _walk_expr(item.expr)
            elif isinstance(item, ast.ElemConstructor):
                yield from _walk_expr(item)
    elif isinstance(expr, ast.DoEnqueue):
        yield from _walk_expr(expr.body)
        for _, value in expr.with_clauses:
            yield from _walk_expr(value)
    elif isinstance(expr, ast.DoReset):
        if expr.key is not None:
            yield from _walk_expr(expr.key)


def validate_application(app: ApplicationDef) -> ValidationReport:
    """Check name resolution, uniqueness and rule-body context constraints."""
    diags: list[Diagnostic] = []

    def check_unique(items, what):
        seen = set()
        for item in items:
            if item.name in seen:
                diags.append(
                    Diagnostic(
                        "duplicate-name", item.name, f"{what} declared more than once"
                    )
                )
            seen.add(item.name)

    check_unique(app.queues, "queue")
    check_unique(app.properties, "property")
    check_unique(app.slicings, "slicing")
    check_unique(app.rules, "rule")

    queue_names = {q.name for q in app.queues}
    slicing_names = {s.name for s in app.slicings}
    property_names = {p.name for p in app.properties}

    for queue in app.queues:
        if queue.errorqueue is not None and queue.errorqueue not in queue_names:
            diags.append(
                Diagnostic(
                    "unresolved-name",
                    queue.name,
                    f"errorqueue {queue.errorqueue!r} is not a declared queue",
                )
            )
        if queue.endpoint is not None and queue.kind not in GATEWAY_KINDS:
            diags.append(
                Diagnostic(
                    "endpoint-misplaced",
                    queue.name,
                    "endpoint is only meaningful on gateway queues",
                )
            )

    for prop in app.properties:
        covered = set()
        for clause in prop.clauses:
            for queue in clause.queues:
                if queue not in queue_names:
                    diags.append(
                        Diagnostic(
                            "unresolved-name",
                            prop.name,
                            f"clause queue {queue!r} is not a declared queue",
                        )
                    )
                if queue in covered:
                    diags.append(
                        Diagnostic(
                            "duplicate-clause-queue",
                            prop.name,
                            f"queue {queue!r} appears in more than one clause",
                        )
                    )
                covered.add(queue)

    for slicing in app.slicings:
        if slicing.property_name not in property_names:
            diags.append(
                Diagnostic(
                    "unresolved-name",
                    slicing.name,
                    f"property {slicing.property_name!r} is not declared",
                )
            )

    for rule in app.rules:
        if rule.target not in queue_names and rule.target not in slicing_names:
            diags.append(
                Diagnostic(
                    "unresolved-name",
                    rule.name,
                    f"target {rule.target!r} is neither a queue nor a slicing",
                )
            )
        if rule.errorqueue is not None and rule.errorqueue not in queue_names:
            diags.append(
                Diagnostic(
                    "unresolved-name",
                    rule.name,
                    f"errorqueue {rule.errorqueue!r} is not a declared queue",
                )
            )
        if rule.target_kind != "slicing":
            for node in _walk_expr(rule.body):
                if isinstance(node, ast.FnCall) and node.name in (
                    "qs:slice",
                    "qs:slicekey",
                ):
                    diags.append(
                        Diagnostic(
                            "slice-function-outside-slicing",
                            rule.name,
                            f"{node.name}() is only valid in a slicing rule",
                        )
                    )
                elif isinstance(node, ast.DoReset) and node.slicing is None:
                    diags.append(
                        Diagnostic(
                            "slice-function-outside-slicing",
                            rule.name,
                            "bare 'do reset' is only valid in a slicing rule",
                        )
                    )
    return ValidationReport(tuple(diags))


def _render_constant(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace('"', '""') + '"'
    if isinstance(value, (int, Decimal)):
        return str(value)
    return render_expression(value)


def render_application(app: ApplicationDef) -> str:
    """Emit canonical application text; parses back to an equal definition."""
    out: list[str] = []
    for queue in app.queues:
        line = f"create queue {queue.name} kind {queue.kind.value} mode {queue.mode.value}"
        if queue.priority:
            line += f" priority {queue.priority}"
        if queue.endpoint is not None:
            line += f' endpoint "{queue.endpoint}"'
        if queue.errorqueue is not None:
            line += f" errorqueue {queue.errorqueue}"
        for annotation in queue.annotations:
            if annotation[0] == "interface":
                line += f" interface {annotation[1]} port {annotation[2]}"
            elif annotation[0] == "using":
                line += f" using {annotation[1]} policy {annotation[2]}"
            elif annotation[0] == "conform":
                line += f" conform to {annotation[1]}"
        out.append(line)
    for prop in app.properties:
        line = f"create property {prop.name} as xs:{prop.value_type.value}"
        if prop.fixed:
            line += " fixed"
        if prop.inherited:
            line += " inherited"
        for clause in prop.clauses:
            line += (
                f"\n  queue {', '.join(clause.queues)}"
                f" value {_render_constant(clause.value)}"
            )
        out.append(line)
    for slicing in app.slicings:
        out.append(f"create slicing {slicing.name} on {slicing.property_name}")
    for rule in app.rules:
        line = f"create rule {rule.name} for {rule.target}"
        if rule.errorqueue is not None:
            line += f" errorqueue {rule.errorqueue}"
        out.append(line + "\n" + render_expression(rule.body))
    return "\n\n".join(out) + "\n"


def parse_typed_value(value_type: ValueType, text: str):
    """Parse external text (CLI, config) into a typed property value."""
    return coerce_value(value_type, text, f"literal {text!r}")


def coerce_value(value_type: ValueType, value, what: str = "value"):
    """Cast an atomic to a property's declared type; PropertyValueError if
    the value does not conform."""
    try:
        if value_type == ValueType.STRING:
            if isinstance(value, str):
                return value
            if isinstance(value, bool):
                return "true" if value else "false"
            if isinstance(value, (int, Decimal)):
                return str(value)
            if isinstance(value, datetime):
                return value.isoformat()
        elif value_type == ValueType.BOOLEAN:
            if isinstance(value, bool):
                return value
            if isinstance(value, str):
                if value.strip() in ("true", "1"):
                    return True
                if value.strip() in ("false", "0"):
                    return False
        elif value_type == ValueType.INTEGER:
            if isinstance(value, bool):
                raise PropertyValueError(f"{what} is not an integer")
            if isinstance(value, int):
                return value
            if isinstance(value, Decimal):
                if value == value.to_integral_value():
                    return int(value)
            if isinstance(value, str):
                return int(value.strip())
        elif value_type == ValueType.DECIMAL:
            if isinstance(value, bool):
                raise PropertyValueError(f"{what} is not a decimal")
            if isinstance(value, (int, Decimal)):
                return Decimal(value)
            if isinstance(value, str):
                return Decimal(value.strip())
        elif value_type == ValueType.DATETIME:
            if isinstance(value, datetime):
                return value if value.tzinfo else value.replace(tzinfo=timezone.utc)
            if isinstance(value, str):
                return datetime.fromisoformat(
                    value.strip().replace("Z", "+00:00")
                )
    except (ValueError, InvalidOperation):
        raise PropertyValueError(
            f"{what} does not conform to xs:{value_type.value}"
        ) from None
    raise PropertyValueError(f"{what} does not conform to xs:{value_type.value}")
