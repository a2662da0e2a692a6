"""declmq: declarative XML message processing on transactional queues.

An application is a set of queue, property, slicing and rule declarations.
Messages are XML documents; rules are XQuery-style expressions that react to
a message's arrival by enqueueing new messages or resetting slices, all
inside one transaction per processed message.
"""

__version__ = "0.1.0"

from . import errors, xmltree
from .applang import parse_application, render_application, validate_application
from .engine import compile_ruleset, process_message
from .scheduler import Scheduler
from .store import Message, Store, deploy_application, open_store

__all__ = [
    "errors",
    "xmltree",
    "parse_application",
    "render_application",
    "validate_application",
    "compile_ruleset",
    "process_message",
    "Scheduler",
    "Message",
    "Store",
    "deploy_application",
    "open_store",
    "__version__",
]
