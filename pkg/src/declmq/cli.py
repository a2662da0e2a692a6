"""Command line interface.

    declmq --store DIR deploy app.q
    declmq --store DIR [--listen HOST:PORT] [--workers N] [--config k=v] run
    declmq --store DIR enqueue QUEUE FILE [--prop name=value]
    declmq --store DIR inspect NAME [KEY]
    declmq --store DIR gc

Global options come before the subcommand.  Deploy exit codes: 1 for syntax
errors, 2 for validation failures, 3 when the store refuses the application
as incompatible with existing data.
"""

from __future__ import annotations

import argparse
import signal
import sys
import threading
from dataclasses import dataclass, fields

from . import xmltree
from .applang import parse_application, parse_typed_value
from .engine import compile_ruleset
from .errors import (
    CompileError,
    DeclmqError,
    IncompatibleApplication,
    ParseError,
    StoreLocked,
)
from .gateways import ConnectionTable, DeliveryWorker, EchoService, GatewayServer
from .scheduler import Scheduler
from .store import deploy_application, open_store
from .sysprops import RESERVED


@dataclass
class EngineConfig:
    sync_timeout: float = 30.0
    delivery_attempts: int = 5
    delivery_backoff: float = 0.5
    retry_limit: int = 100
    gc_on_idle: bool = False
    default_error_queue: str = "systemErrors"
    sender_name: str = ""
    idle_interval: float = 0.05

    @classmethod
    def from_pairs(cls, pairs: list[str]) -> "EngineConfig":
        config = cls()
        known = {f.name for f in fields(cls)}
        for pair in pairs:
            key, sep, value = pair.partition("=")
            key = key.replace("-", "_")
            if not sep or key not in known:
                raise SystemExit(f"unknown config setting: {pair!r}")
            current = getattr(config, key)
            if isinstance(current, bool):
                setattr(config, key, value.lower() in ("true", "1", "yes", "on"))
            elif isinstance(current, int):
                setattr(config, key, int(value))
            elif isinstance(current, float):
                setattr(config, key, float(value))
            else:
                setattr(config, key, value)
        return config


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="declmq",
        description="Declarative XML message queue engine.",
    )
    parser.add_argument("--store", default="./store",
                        help="store directory (default ./store)")
    parser.add_argument("--listen", default=None, metavar="HOST:PORT",
                        help="serve HTTP gateways on this address")
    parser.add_argument("--workers", type=int, default=1,
                        help="dispatch worker threads (default 1)")
    parser.add_argument("--config", action="append", default=[],
                        metavar="KEY=VALUE", help="engine setting override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("deploy", help="install an application into a store")
    p.add_argument("appfile", help="application source file")

    sub.add_parser("run", help="process messages until interrupted")

    p = sub.add_parser("enqueue", help="append a message to a queue")
    p.add_argument("queue")
    p.add_argument("file", help="XML message file, or - for stdin")
    p.add_argument("--prop", action="append", default=[],
                   metavar="NAME=VALUE", help="explicit property")

    p = sub.add_parser("inspect", help="show a queue, or a slice by key")
    p.add_argument("name", help="queue or slicing name")
    p.add_argument("key", nargs="?", help="slice key (slicings only)")

    sub.add_parser("gc", help="collect unreferencable messages")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    config = EngineConfig.from_pairs(args.config)
    try:
        handler = {
            "deploy": cmd_deploy,
            "run": cmd_run,
            "enqueue": cmd_enqueue,
            "inspect": cmd_inspect,
            "gc": cmd_gc,
        }[args.command]
        return handler(args, config)
    except StoreLocked as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except DeclmqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def cmd_deploy(args, config: EngineConfig) -> int:
    try:
        with open(args.appfile, encoding="utf-8") as fh:
            source = fh.read()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        app = parse_application(source)
    except ParseError as exc:
        print(f"syntax error: {exc}", file=sys.stderr)
        return 1
    try:
        compile_ruleset(app, default_error_queue=config.default_error_queue)
    except CompileError as exc:
        for diag in exc.diagnostics:
            print(f"invalid: {diag}", file=sys.stderr)
        return 2
    try:
        deploy_application(args.store, source, app)
    except IncompatibleApplication as exc:
        print(f"incompatible: {exc}", file=sys.stderr)
        return 3
    print(f"deployed {len(app.queues)} queue(s), {len(app.rules)} rule(s)"
          f" to {args.store}")
    return 0


def cmd_run(args, config: EngineConfig) -> int:
    store = open_store(args.store)
    try:
        compiled = compile_ruleset(
            store.app, default_error_queue=config.default_error_queue)
        scheduler = Scheduler(store, compiled, workers=args.workers,
                              max_retries=config.retry_limit)
        connections = ConnectionTable()
        delivery = DeliveryWorker(
            store, compiled, scheduler, connections,
            max_attempts=config.delivery_attempts,
            backoff=config.delivery_backoff,
            sender_name=config.sender_name or None)
        echo = EchoService(store, compiled, scheduler)
        hooks = [echo.tick, delivery.tick]
        if config.gc_on_idle:
            hooks.append(lambda: scheduler.pending() == 0
                         and store.garbage_collect())
        server = None
        if args.listen:
            host, _, port = args.listen.rpartition(":")
            server = GatewayServer(store, compiled, scheduler, connections,
                                   host=host or "127.0.0.1", port=int(port),
                                   sync_timeout=config.sync_timeout)
            server.start()
            print(f"listening on {host or '127.0.0.1'}:{server.port}",
                  flush=True)
        print(f"processing messages from {args.store}"
              f" ({args.workers} worker(s)); interrupt to stop", flush=True)
        stop = threading.Event()
        for signum in (signal.SIGINT, signal.SIGTERM):
            signal.signal(signum, lambda *_: stop.set())
        try:
            scheduler.run(stop, idle_hooks=tuple(hooks),
                          idle_interval=config.idle_interval)
        finally:
            if server is not None:
                server.stop()
        return 0
    finally:
        store.close()


def cmd_enqueue(args, config: EngineConfig) -> int:
    if args.file == "-":
        raw = sys.stdin.buffer.read()
    else:
        with open(args.file, "rb") as fh:
            raw = fh.read()
    store = open_store(args.store)
    try:
        body = xmltree.parse_document(raw)
        explicit = []
        for pair in args.prop:
            name, sep, value = pair.partition("=")
            if not sep:
                print(f"error: --prop needs NAME=VALUE, got {pair!r}",
                      file=sys.stderr)
                return 1
            declared = store.app.property_map.get(name)
            if declared is not None:
                explicit.append((name, parse_typed_value(declared.value_type,
                                                         value)))
            elif name in RESERVED:
                explicit.append((name, parse_typed_value(
                    RESERVED[name].value_type, value)))
            else:
                print(f"error: unknown property {name}", file=sys.stderr)
                return 1
        with store.begin_txn() as txn:
            mid = txn.enqueue_message(args.queue, body, explicit)
            txn.commit()
        print(f"enqueued message {mid} into {args.queue}")
        return 0
    finally:
        store.close()


def cmd_inspect(args, config: EngineConfig) -> int:
    store = open_store(args.store, read_only=True)
    try:
        snap = store.snapshot()
        if args.name in store.app.queue_map:
            if args.key is not None:
                print("error: a queue takes no key", file=sys.stderr)
                return 1
            messages = snap.read_queue(args.name)
            print(f"queue: {args.name}")
        elif args.name in store.app.slicing_map:
            if args.key is None:
                print("error: a slicing needs a key", file=sys.stderr)
                return 1
            sdef = store.app.slicing_map[args.name]
            prop = store.app.property_map[sdef.property_name]
            key = parse_typed_value(prop.value_type, args.key)
            messages = snap.read_slice(args.name, key)
            print(f"slicing: {args.name}")
            print(f"key: {args.key}")
            print(f"generation: {snap.generation(args.name, key)}")
        else:
            print(f"error: no queue or slicing named {args.name}",
                  file=sys.stderr)
            return 1
        print(f"messages: {len(messages)}")
        for msg in messages:
            print()
            print(f"message: {msg.id}")
            print(f"queue: {msg.queue}")
            print(f"processed: {'true' if snap.is_processed(msg.id) else 'false'}")
            if msg.creating_rule:
                print(f"rule: {msg.creating_rule}")
            for name in sorted(msg.props):
                print(f"property {name}: {msg.props[name]}")
            print(f"body: {xmltree.serialize(msg.body)}")
        return 0
    finally:
        store.close()


def cmd_gc(args, config: EngineConfig) -> int:
    store = open_store(args.store)
    try:
        removed = store.garbage_collect()
        print(f"collected {removed} message(s)")
        return 0
    finally:
        store.close()


if __name__ == "__main__":
    sys.exit(main())
