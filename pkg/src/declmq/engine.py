"""Rule compilation and message processing.

``compile_ruleset`` turns a parsed application into per-queue execution
plans, failing loudly on anything validation or static expression checks
can catch.  ``process_message`` runs one message through its queue's plan
inside a single transaction: every rule is evaluated first against the
transaction snapshot (so no rule observes another's effects, or its own),
then the buffered updates are applied rule by rule.  A rule that fails at
evaluation or apply time is contained: its updates are rolled back to a
savepoint and an error message is enqueued instead, in the same
transaction, onto the first declared queue in the chain
rule errorqueue, queue errorqueue, engine default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from datetime import datetime

from . import xmltree
from .applang import ApplicationDef, Diagnostic, validate_application
from .errors import (
    CompileError,
    ConflictAbort,
    DynamicError,
    FatalError,
    FixedPropertyOverride,
    PropertyValueError,
    StoreError,
    UnknownProperty,
    UnresolvableErrorQueue,
)
from .qml import ast
from .qml.evaluator import (
    BUILTIN_ARITIES,
    EnqueueUpdate,
    EvalContext,
    evaluate,
)
from .store import Message, Store, Txn
from .sysprops import RESERVED

DEFAULT_ERROR_QUEUE = "systemErrors"

# Error category elements, first child of every <error> document.
EXPRESSION_ERROR = "expressionError"
TRANSPORT_ERROR = "disconnectedTransport"
SCHEMA_ERROR = "schemaError"
PROPERTY_ERROR = "propertyError"
SYSTEM_ERROR = "systemError"


@dataclass(frozen=True)
class CompiledRule:
    name: str
    target_kind: str  # "queue" | "slicing"
    target: str
    body: object
    errorqueue: str | None
    slice_property: str | None  # key property for slicing rules


@dataclass(frozen=True)
class CompiledApp:
    app: ApplicationDef
    plans: dict  # queue name -> tuple[CompiledRule, ...]
    known_properties: frozenset
    default_error_queue: str | None


def transform(node, fn):
    """Rebuild an expression tree bottom-up, applying ``fn`` to each node."""
    if isinstance(node, tuple):
        return tuple(transform(item, fn) for item in node)
    if not (dataclasses.is_dataclass(node) and not isinstance(node, type)):
        return node
    rebuilt = dataclasses.replace(node, **{
        f.name: transform(getattr(node, f.name), fn)
        for f in dataclasses.fields(node)
    })
    return fn(rebuilt)


def iter_nodes(node):
    """Yield every dataclass node in an expression tree, preorder."""
    if isinstance(node, tuple):
        for item in node:
            yield from iter_nodes(item)
        return
    if not (dataclasses.is_dataclass(node) and not isinstance(node, type)):
        return
    yield node
    for f in dataclasses.fields(node):
        yield from iter_nodes(getattr(node, f.name))


def _fn_name(name: str) -> str:
    return name[3:] if name.startswith("fn:") else name


def _expression_diagnostics(app: ApplicationDef, subject: str, body,
                            target_kind: str | None) -> list[Diagnostic]:
    diags = []
    for node in iter_nodes(body):
        if isinstance(node, ast.FnCall):
            name = _fn_name(node.name)
            if name not in BUILTIN_ARITIES:
                diags.append(Diagnostic(
                    "unknown-function", subject,
                    f"{node.name}() is not a known function"))
            elif len(node.args) not in BUILTIN_ARITIES[name]:
                diags.append(Diagnostic(
                    "wrong-arity", subject,
                    f"{node.name}() does not take {len(node.args)} argument(s)"))
            elif name == "qs:queue" and not node.args and target_kind != "queue":
                diags.append(Diagnostic(
                    "queue-context", subject,
                    "zero-argument qs:queue() is only valid in a queue rule"))
        elif isinstance(node, ast.DoEnqueue):
            if node.queue not in app.queue_map:
                diags.append(Diagnostic(
                    "unresolved-name", subject,
                    f"enqueue target queue {node.queue} is not declared"))
            for prop_name, _ in node.with_clauses:
                reserved = RESERVED.get(prop_name)
                if reserved is not None:
                    if not reserved.settable:
                        diags.append(Diagnostic(
                            "fixed-property", subject,
                            f"{prop_name} is system-set and cannot be supplied"))
                elif prop_name not in app.property_map:
                    diags.append(Diagnostic(
                        "unresolved-name", subject,
                        f"with-clause property {prop_name} is not declared"))
        elif isinstance(node, ast.DoReset) and node.slicing is not None:
            if node.slicing not in app.slicing_map:
                diags.append(Diagnostic(
                    "unresolved-name", subject,
                    f"reset target slicing {node.slicing} is not declared"))
    return diags


def compile_ruleset(app: ApplicationDef, *,
                    default_error_queue: str = DEFAULT_ERROR_QUEUE) -> CompiledApp:
    """Validate and compile an application; raises CompileError when dirty."""
    diags = list(validate_application(app).diagnostics)
    for prop in app.properties:
        if prop.name in RESERVED:
            diags.append(Diagnostic(
                "reserved-property", prop.name,
                "this property name is system-managed"))
        for clause in prop.clauses:
            if dataclasses.is_dataclass(clause.value):
                diags.extend(_expression_diagnostics(
                    app, f"property {prop.name}", clause.value, None))
    for rule in app.rules:
        diags.extend(_expression_diagnostics(
            app, f"rule {rule.name}", rule.body, rule.target_kind))
    if diags:
        raise CompileError(diags)

    plans: dict[str, tuple[CompiledRule, ...]] = {}
    for queue in app.queues:
        entries = []
        for rule in app.rules:
            if rule.target_kind == "queue":
                if rule.target != queue.name:
                    continue
                body = _bind_queue(rule.body, queue.name)
                entries.append(CompiledRule(rule.name, "queue", rule.target,
                                            body, rule.errorqueue, None))
            else:
                sdef = app.slicing_map[rule.target]
                entries.append(CompiledRule(rule.name, "slicing", rule.target,
                                            rule.body, rule.errorqueue,
                                            sdef.property_name))
        plans[queue.name] = tuple(entries)

    return CompiledApp(
        app=app,
        plans=plans,
        known_properties=frozenset(app.property_map) | frozenset(RESERVED),
        default_error_queue=default_error_queue,
    )


def _bind_queue(body, queue_name: str):
    """Resolve zero-argument qs:queue() to the rule's own queue."""
    def fix(node):
        if (isinstance(node, ast.FnCall) and _fn_name(node.name) == "qs:queue"
                and not node.args):
            return ast.FnCall("qs:queue", (ast.StringLit(queue_name),))
        return node
    return transform(body, fix)


# -- error messages -----------------------------------------------------------


def classify_error(exc: Exception) -> str:
    if isinstance(exc, (PropertyValueError, FixedPropertyOverride,
                        UnknownProperty)):
        return PROPERTY_ERROR
    if isinstance(exc, DynamicError):
        return EXPRESSION_ERROR
    return SYSTEM_ERROR


def build_error_message(kind: str, rule_name: str | None,
                        queue_name: str | None, description: str,
                        initial, now: datetime) -> xmltree.Document:
    """Assemble an <error> document.

    ``initial`` may be a Document (copied in), raw str/bytes (kept as text,
    for payloads that never parsed), or None.
    """
    children = [xmltree.element(kind)]
    if rule_name:
        children.append(xmltree.element("ruleName", (), [xmltree.text(rule_name)]))
    if queue_name:
        children.append(xmltree.element("queueName", (), [xmltree.text(queue_name)]))
    children.append(xmltree.element("timestamp", (),
                                    [xmltree.text(now.isoformat())]))
    children.append(xmltree.element("description", (),
                                    [xmltree.text(description)]))
    if initial is not None:
        if isinstance(initial, bytes):
            payload = [xmltree.text(initial.decode("utf-8", "replace"))]
        elif isinstance(initial, str):
            payload = [xmltree.text(initial)]
        else:
            payload = [xmltree.copy_node(initial)]
        children.append(xmltree.element("initialMessage", (), payload))
    return xmltree.make_document(xmltree.element("error", (), children))


def resolve_error_queue(compiled: CompiledApp, rule_errorqueue: str | None,
                        queue_name: str | None) -> str:
    qdesc = compiled.app.queue_map.get(queue_name) if queue_name else None
    candidates = (
        rule_errorqueue,
        qdesc.errorqueue if qdesc else None,
        compiled.default_error_queue,
    )
    for candidate in candidates:
        if candidate and candidate in compiled.app.queue_map:
            return candidate
    raise UnresolvableErrorQueue(
        f"no error queue is declared for failures on queue {queue_name!r}"
    )


# -- processing ----------------------------------------------------------------


@dataclass
class RuleOutcome:
    rule: str
    status: str  # "applied" | "skipped" | "error"
    detail: str = ""


@dataclass
class ProcessResult:
    message_id: int
    status: str  # "processed" | "skipped"
    outcomes: list = field(default_factory=list)
    committed: list = field(default_factory=list)  # newly visible messages


def process_message(store: Store, compiled: CompiledApp,
                    message_id: int) -> ProcessResult:
    """Run one message through its queue's plan in a single transaction.

    Raises ConflictAbort when commit-time validation fails (retry), and
    FatalError when even error containment is impossible.
    """
    with store.begin_txn() as txn:
        msg = txn.snapshot.get(message_id)
        if msg is None or txn.snapshot.is_processed(message_id):
            txn.abort()
            return ProcessResult(message_id, "skipped")

        plan = compiled.plans.get(msg.queue, ())
        evaluated: list[tuple[CompiledRule, object]] = []
        outcomes: list[RuleOutcome] = []
        for rule in plan:
            slice_key = None
            if rule.target_kind == "slicing":
                slice_key = msg.props.get(rule.slice_property)
                if slice_key is None:
                    outcomes.append(RuleOutcome(
                        rule.name, "skipped",
                        f"message carries no {rule.slice_property}"))
                    continue
            ctx = EvalContext(
                message=msg,
                snapshot=txn,
                rule_target_kind=rule.target_kind,
                rule_target_name=rule.target,
                slice_key=slice_key,
                clock=store.clock,
                known_properties=compiled.known_properties,
            )
            try:
                _values, updates = evaluate(rule.body, ctx)
                evaluated.append((rule, updates))
            except DynamicError as exc:
                evaluated.append((rule, exc))

        for rule, result in evaluated:
            if isinstance(result, Exception):
                outcomes.append(_contain_failure(store, compiled, txn, rule,
                                                 msg, result))
                continue
            sp = txn.savepoint()
            try:
                for update in result:
                    if isinstance(update, EnqueueUpdate):
                        txn.enqueue_message(update.queue, update.body,
                                            update.explicit, trigger=msg,
                                            creating_rule=rule.name)
                    else:
                        txn.reset_slice(update.slicing, update.key)
                outcomes.append(RuleOutcome(rule.name, "applied"))
            except ConflictAbort:
                raise
            except (DynamicError, StoreError) as exc:
                txn.rollback_to(sp)
                outcomes.append(_contain_failure(store, compiled, txn, rule,
                                                 msg, exc))

        txn.mark_processed(message_id)
        committed = txn.commit()
        return ProcessResult(message_id, "processed", outcomes, committed)


def _contain_failure(store: Store, compiled: CompiledApp, txn: Txn,
                     rule: CompiledRule, msg: Message,
                     exc: Exception) -> RuleOutcome:
    kind = classify_error(exc)
    target = resolve_error_queue(compiled, rule.errorqueue, msg.queue)
    body = build_error_message(kind, rule.name, msg.queue, str(exc),
                               msg.body, store.clock())
    try:
        txn.enqueue_message(target, body, trigger=msg,
                            creating_rule=rule.name)
    except (DynamicError, StoreError) as inner:
        raise FatalError(
            f"error containment failed while enqueueing into {target}: {inner}"
        ) from exc
    return RuleOutcome(rule.name, "error", f"{kind}: {exc}")
