"""Independent reference implementations used to check derived behavior.

Nothing here imports the evaluator or the store internals. The path oracle
walks trees recursively with plain loops; the slice oracle replays an
enqueue/reset event list. Both are deliberately naive so a shared bug with
the real implementations is unlikely.
"""

from __future__ import annotations

import random
from decimal import Decimal

from declmq import xmltree
from declmq.qml import ast as qast


# ---------------------------------------------------------------------------
# naive path oracle


def _element_children(node):
    return [c for c in getattr(node, "children", ()) if isinstance(c, xmltree.Element)]


def _descend(node) -> list:
    out = [node]
    for child in _element_children(node):
        out.extend(_descend(child))
    return out


def _order(nodes: list) -> list:
    seen: set[int] = set()
    unique = []
    for n in nodes:
        if id(n) not in seen:
            seen.add(id(n))
            unique.append(n)
    unique.sort(key=xmltree.document_order_key)
    return unique


def _string_of(node) -> str:
    return xmltree.string_value(node)


def _pred_value(pred, context_node):
    """Evaluate the restricted predicate forms the generator emits."""
    if isinstance(pred, qast.IntLit):
        return pred.value
    if isinstance(pred, qast.PathExpr):
        return oracle_path(context_node, pred)
    if isinstance(pred, qast.ComparisonExpr):
        left = oracle_path(context_node, pred.left)
        right = pred.right.value
        found = any(_string_of(n) == right for n in left)
        return found if pred.op == "=" else any(_string_of(n) != right for n in left)
    raise TypeError(f"oracle cannot evaluate predicate {pred!r}")


def _pred_keep(pred, context_node, position: int) -> bool:
    value = _pred_value(pred, context_node)
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, Decimal)):
        return value == position
    if isinstance(value, list):
        return bool(value)
    raise TypeError(type(value))


def _step_candidates(node, step: qast.PathStep) -> list:
    if step.axis == qast.CHILD:
        return [
            c
            for c in _element_children(node)
            if step.test == "*" or c.name == step.test
        ]
    if step.axis == qast.ATTRIBUTE:
        return [
            a
            for a in getattr(node, "attributes", ())
            if step.test == "*" or a.name == step.test
        ]
    raise TypeError(step.axis)


def oracle_path(start, path: qast.PathExpr) -> list:
    """Evaluate a path over one starting node, the slow obvious way."""
    if path.source is not None:
        raise TypeError("oracle paths start from a context node")
    current = [start.doc if path.absolute else start]
    for step in path.steps:
        if step.axis == qast.DESCEND:
            pool = []
            for node in current:
                pool.extend(_descend(node))
            current = _order(pool)
            continue
        if step.axis == qast.FILTER:
            for pred in step.predicates:
                current = [
                    item
                    for pos, item in enumerate(current, start=1)
                    if _pred_keep(pred, item, pos)
                ]
            continue
        pool = []
        for node in current:
            selected = _step_candidates(node, step)
            for pred in step.predicates:
                selected = [
                    item
                    for pos, item in enumerate(selected, start=1)
                    if _pred_keep(pred, item, pos)
                ]
            pool.extend(selected)
        current = _order(pool)
    return current


# ---------------------------------------------------------------------------
# random corpus generators (documents and subset paths)

NAMES = ["a", "b", "c", "d"]
ATTR_NAMES = ["p", "q"]
WORDS = ["x", "y", "z", "42", "7"]


def random_document(rng: random.Random) -> xmltree.Document:
    def build(depth: int) -> xmltree.Element:
        attrs = [
            (name, rng.choice(WORDS))
            for name in ATTR_NAMES
            if rng.random() < 0.35
        ]
        children: list = []
        for _ in range(rng.randint(0, 3 if depth < 3 else 0)):
            children.append(build(depth + 1))
        if rng.random() < 0.5:
            children.insert(rng.randint(0, len(children)), xmltree.text(rng.choice(WORDS)))
        return xmltree.element(rng.choice(NAMES), attrs, children)

    return xmltree.make_document(build(0))


def _random_predicate(rng: random.Random, depth: int) -> qast.Expr:
    roll = rng.random()
    if roll < 0.35:
        return qast.IntLit(rng.randint(1, 3))
    if roll < 0.7 or depth >= 2:
        return _random_path(rng, depth + 1, absolute=False, allow_predicates=False)
    return qast.ComparisonExpr(
        "=",
        _random_path(rng, depth + 1, absolute=False, allow_predicates=False),
        qast.StringLit(rng.choice(WORDS)),
    )


def _random_path(
    rng: random.Random,
    depth: int = 0,
    absolute: bool | None = None,
    allow_predicates: bool = True,
) -> qast.PathExpr:
    if absolute is None:
        absolute = rng.random() < 0.6
    steps: list[qast.PathStep] = []
    n_steps = rng.randint(1, 3)
    for i in range(n_steps):
        if rng.random() < 0.4:
            steps.append(qast.PathStep(qast.DESCEND, None))
        last = i == n_steps - 1
        if last and rng.random() < 0.3:
            test = rng.choice(ATTR_NAMES + ["*"])
            axis = qast.ATTRIBUTE
        else:
            test = rng.choice(NAMES + ["*"])
            axis = qast.CHILD
        preds: tuple = ()
        if allow_predicates and rng.random() < 0.4:
            preds = (_random_predicate(rng, depth),)
        steps.append(qast.PathStep(axis, test, preds))
    return qast.PathExpr(None, absolute, tuple(steps))


def random_path(rng: random.Random) -> qast.PathExpr:
    return _random_path(rng)


# ---------------------------------------------------------------------------
# brute-force slice oracle


class SliceOracle:
    """Replays enqueue/reset events and answers slice membership queries.

    A message belongs to slice (s, k) while it carries value k for the key
    property of s and no reset of (s, k) happened after its enqueue.
    """

    def __init__(self, slicings: dict[str, str]):
        self.slicings = dict(slicings)  # slicing name -> key property name
        self.events: list[tuple] = []  # ("enq", id, props) | ("reset", s, key)

    def enqueue(self, message_id: int, props: dict) -> None:
        self.events.append(("enq", message_id, dict(props)))

    def reset(self, slicing: str, key) -> None:
        self.events.append(("reset", slicing, key))

    def members(self, slicing: str, key) -> list[int]:
        prop = self.slicings[slicing]
        out: list[int] = []
        for event in self.events:
            if event[0] == "enq":
                _, mid, props = event
                if props.get(prop) == key:
                    out.append(mid)
            else:
                _, s, k = event
                if s == slicing and k == key:
                    out = []
        return out

    def keys(self, slicing: str) -> set:
        prop = self.slicings[slicing]
        found = set()
        for event in self.events:
            if event[0] == "enq" and prop in event[2]:
                found.add(event[2][prop])
            elif event[0] == "reset" and event[1] == slicing:
                found.add(event[2])
        return found
