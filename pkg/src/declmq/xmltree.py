"""Immutable XML node trees.

Messages are XML documents; expressions navigate them and construct new ones.
The model is deliberately small: document, element, attribute and text nodes,
no namespaces beyond lexical prefixes, no comments or processing instructions.

Trees are built unsealed (``doc`` unset) and become immutable once adopted by
a :func:`make_document` call, which assigns the owner document and a preorder
position to every node. The position gives a total document order, which path
evaluation needs for merging and deduplicating step results. Nodes from a
sealed tree can only enter a new tree as copies (:func:`copy_node`).
"""

from __future__ import annotations

import itertools
from xml.parsers import expat

from .errors import XmlParseError

_doc_ids = itertools.count(1)


class Document:
    """Root of a sealed tree. Its only child is the root element."""

    __slots__ = ("children", "doc_id", "pos")

    def __init__(self):
        self.children: tuple = ()
        self.doc_id = 0
        self.pos = 0

    @property
    def doc(self) -> "Document":
        return self

    @property
    def root(self):
        return self.children[0] if self.children else None

    def __repr__(self):
        return f"<Document {serialize(self)!r}>"


class Element:
    __slots__ = ("name", "attributes", "children", "doc", "pos")

    def __init__(self, name: str, attributes: tuple = (), children: tuple = ()):
        self.name = name
        self.attributes = attributes
        self.children = children
        self.doc: Document | None = None
        self.pos = 0

    def __repr__(self):
        return f"<Element {serialize(self)!r}>"


class Attribute:
    __slots__ = ("name", "value", "doc", "pos")

    def __init__(self, name: str, value: str):
        self.name = name
        self.value = value
        self.doc: Document | None = None
        self.pos = 0

    def __repr__(self):
        return f"<Attribute {self.name}={self.value!r}>"


class Text:
    __slots__ = ("content", "doc", "pos")

    def __init__(self, content: str):
        self.content = content
        self.doc: Document | None = None
        self.pos = 0

    def __repr__(self):
        return f"<Text {self.content!r}>"


Node = Document | Element | Attribute | Text


def is_node(value) -> bool:
    return isinstance(value, (Document, Element, Attribute, Text))


def element(name: str, attrs=(), children=()) -> Element:
    """Build an unsealed element.

    ``attrs`` is a sequence of (name, value) pairs; ``children`` a sequence of
    unsealed Element/Text nodes or plain strings. Adjacent text runs are
    merged and empty text dropped so equal content compares equal.
    """
    attributes = tuple(Attribute(n, v) for n, v in attrs)
    merged: list = []
    for child in children:
        if isinstance(child, str):
            child = Text(child)
        if isinstance(child, Text):
            if not child.content:
                continue
            if merged and isinstance(merged[-1], Text):
                merged[-1] = Text(merged[-1].content + child.content)
                continue
        else:
            if child.doc is not None:
                raise ValueError("sealed node must be copied before reuse")
        merged.append(child)
    return Element(name, attributes, tuple(merged))


def text(content: str) -> Text:
    return Text(content)


def copy_node(node: Node):
    """Deep copy a node into unsealed form, ready for adoption."""
    if isinstance(node, Document):
        return copy_node(node.root)
    if isinstance(node, Element):
        return element(
            node.name,
            [(a.name, a.value) for a in node.attributes],
            [copy_node(c) for c in node.children],
        )
    if isinstance(node, Text):
        return Text(node.content)
    if isinstance(node, Attribute):
        return Attribute(node.name, node.value)
    raise TypeError(f"not a node: {node!r}")


def make_document(root: Element) -> Document:
    """Seal an unsealed element tree under a fresh document node."""
    if not isinstance(root, Element):
        raise TypeError("document root must be an element")
    if root.doc is not None:
        raise ValueError("sealed node must be copied before reuse")
    doc = Document()
    doc.doc_id = next(_doc_ids)
    doc.children = (root,)
    counter = itertools.count(1)

    def seal(node):
        node.doc = doc
        node.pos = next(counter)
        if isinstance(node, Element):
            for attr in node.attributes:
                attr.doc = doc
                attr.pos = next(counter)
            for child in node.children:
                seal(child)

    seal(root)
    return doc


def parse_document(data: str | bytes) -> Document:
    """Parse XML text into a sealed document.

    Raises XmlParseError with line/column on malformed input. External
    entities and DTDs are not resolved.
    """
    parser = expat.ParserCreate()
    parser.ordered_attributes = True
    parser.buffer_text = True
    stack: list[list] = [[]]

    def start(name, attrs):
        pairs = [(attrs[i], attrs[i + 1]) for i in range(0, len(attrs), 2)]
        stack.append([name, pairs])

    def end(name):
        frame = stack.pop()
        node = element(frame[0], frame[1], frame[2:])
        stack[-1].append(node)

    def chars(content):
        stack[-1].append(content)

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    parser.CharacterDataHandler = chars
    try:
        if isinstance(data, str):
            data = data.encode("utf-8")
        parser.Parse(data, True)
    except expat.ExpatError as exc:
        raise XmlParseError(
            expat.errors.messages[exc.code], exc.lineno, exc.offset + 1
        ) from None
    roots = [n for n in stack[0] if isinstance(n, Element)]
    if len(roots) != 1:
        raise XmlParseError("document must have exactly one root element")
    return make_document(roots[0])


def _escape_text(value: str) -> str:
    return value.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _escape_attr(value: str) -> str:
    return _escape_text(value).replace('"', "&quot;")


def serialize(node: Node) -> str:
    """Render a node as compact XML text. Stable for equal trees."""
    out: list[str] = []
    _write(node, out)
    return "".join(out)


def _write(node: Node, out: list[str]) -> None:
    if isinstance(node, Document):
        for child in node.children:
            _write(child, out)
    elif isinstance(node, Element):
        out.append(f"<{node.name}")
        for attr in node.attributes:
            out.append(f' {attr.name}="{_escape_attr(attr.value)}"')
        if node.children:
            out.append(">")
            for child in node.children:
                _write(child, out)
            out.append(f"</{node.name}>")
        else:
            out.append("/>")
    elif isinstance(node, Text):
        out.append(_escape_text(node.content))
    elif isinstance(node, Attribute):
        out.append(f'{node.name}="{_escape_attr(node.value)}"')
    else:
        raise TypeError(f"not a node: {node!r}")


def string_value(node: Node) -> str:
    """XPath string value: concatenated descendant text."""
    if isinstance(node, Text):
        return node.content
    if isinstance(node, Attribute):
        return node.value
    parts: list[str] = []

    def walk(n):
        if isinstance(n, Text):
            parts.append(n.content)
        elif isinstance(n, (Element, Document)):
            for child in n.children:
                walk(child)

    walk(node)
    return "".join(parts)


def document_order_key(node: Node) -> tuple[int, int]:
    """Total order over sealed nodes: document id, then preorder position."""
    return (node.doc.doc_id, node.pos)


def deep_equal(a: Node, b: Node) -> bool:
    """Structural equality ignoring node identity and document ownership."""
    if isinstance(a, Document) or isinstance(b, Document):
        if not (isinstance(a, Document) and isinstance(b, Document)):
            return False
        return len(a.children) == len(b.children) and all(
            deep_equal(x, y) for x, y in zip(a.children, b.children)
        )
    if isinstance(a, Element) and isinstance(b, Element):
        return (
            a.name == b.name
            and [(x.name, x.value) for x in a.attributes]
            == [(y.name, y.value) for y in b.attributes]
            and len(a.children) == len(b.children)
            and all(deep_equal(x, y) for x, y in zip(a.children, b.children))
        )
    if isinstance(a, Text) and isinstance(b, Text):
        return a.content == b.content
    if isinstance(a, Attribute) and isinstance(b, Attribute):
        return a.name == b.name and a.value == b.value
    return False
