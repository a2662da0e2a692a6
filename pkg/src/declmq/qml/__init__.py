"""Expression language: syntax trees, parser and evaluator."""

from . import ast
from .evaluator import (
    EnqueueUpdate,
    EvalContext,
    PendingUpdate,
    ResetUpdate,
    atomize,
    builtin_call,
    effective_boolean,
    eval_path,
    evaluate,
    general_compare,
)
from .parser import ExprParser, parse_expression
from .ast import render_expression

__all__ = [
    "ast",
    "EnqueueUpdate",
    "EvalContext",
    "ExprParser",
    "PendingUpdate",
    "ResetUpdate",
    "atomize",
    "builtin_call",
    "effective_boolean",
    "eval_path",
    "evaluate",
    "general_compare",
    "parse_expression",
    "render_expression",
]
