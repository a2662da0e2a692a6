"""Queue-backed system services: HTTP ingress, outbound delivery, timers.

Incoming gateway queues are fed by ``POST /queues/{name}``; the sender is
taken from the ``X-Demaq-Sender`` header when present.  ``?sync=true``
parks the connection until some outgoing message carries the request's
ConnectionId back, or the timeout passes.

Outgoing gateway queues are watched by :class:`DeliveryWorker`, which
first tries connection correlation, then POSTs to the queue endpoint or,
failing that, to the message's Recipient or Sender property.  Transient
failures back off exponentially; after the attempt budget the message is
resolved as failed with a transport error message on the error queue.

Echo queues are timers: :class:`EchoService` re-enqueues a copy of each
message into its EchoTarget once CreationTime + EchoDelay seconds have
passed, marking the original processed in the same transaction so a timer
fires exactly once even across a crash.
"""

from __future__ import annotations

import threading
import urllib.error
import urllib.parse
import urllib.request
import uuid
from datetime import datetime, timedelta
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import xmltree
from .applang import QueueKind
from .engine import (
    SCHEMA_ERROR,
    SYSTEM_ERROR,
    TRANSPORT_ERROR,
    CompiledApp,
    build_error_message,
    resolve_error_queue,
)
from .errors import ConflictAbort, XmlParseError
from .scheduler import Scheduler
from .store import Message, Store

SENDER_HEADER = "X-Demaq-Sender"


class ConnectionTable:
    """Live sync connections, keyed by ConnectionId."""

    def __init__(self):
        self._mutex = threading.Lock()
        self._slots: dict[str, list] = {}  # cid -> [Event, Message | None]

    def register(self, cid: str) -> None:
        with self._mutex:
            self._slots[cid] = [threading.Event(), None]

    def fulfill(self, cid: str, message: Message) -> bool:
        """Hand a reply to a waiting connection; False if nobody waits."""
        with self._mutex:
            slot = self._slots.get(cid)
            if slot is None or slot[1] is not None:
                return False
            slot[1] = message
            slot[0].set()
            return True

    def wait(self, cid: str, timeout: float) -> Message | None:
        with self._mutex:
            slot = self._slots.get(cid)
        if slot is None:
            return None
        slot[0].wait(timeout)
        with self._mutex:
            self._slots.pop(cid, None)
        return slot[1]

    def forget(self, cid: str) -> None:
        with self._mutex:
            self._slots.pop(cid, None)


class GatewayServer:
    """HTTP front door for incoming gateway queues."""

    def __init__(self, store: Store, compiled: CompiledApp,
                 scheduler: Scheduler, connections: ConnectionTable, *,
                 host: str = "127.0.0.1", port: int = 0,
                 sync_timeout: float = 30.0):
        self.store = store
        self.compiled = compiled
        self.scheduler = scheduler
        self.connections = connections
        self.sync_timeout = sync_timeout
        self._arrival_mutex = threading.Lock()
        self._last_arrival: dict[str, datetime] = {}
        gateway = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                pass

            def do_POST(self):
                gateway._handle_post(self)

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True, name="gateway-http")
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    # -- request handling ---------------------------------------------------

    def _next_arrival(self, queue: str) -> datetime:
        """Strictly increasing arrival timestamp per queue."""
        with self._arrival_mutex:
            now = self.store.clock()
            last = self._last_arrival.get(queue)
            if last is not None and now <= last:
                now = last + timedelta(microseconds=1)
            self._last_arrival[queue] = now
            return now

    def _handle_post(self, request: BaseHTTPRequestHandler) -> None:
        url = urllib.parse.urlparse(request.path)
        parts = [p for p in url.path.split("/") if p]
        if len(parts) != 2 or parts[0] != "queues":
            _respond(request, 404, b"not found\n")
            return
        queue = parts[1]
        query = urllib.parse.parse_qs(url.query)
        sync = query.get("sync", ["false"])[0].lower() in ("true", "1")
        qdesc = self.store.app.queue_map.get(queue)
        if qdesc is None or qdesc.kind != QueueKind.INCOMING_GATEWAY:
            _respond(request, 404, f"no incoming gateway queue {queue}\n".encode())
            return
        length = int(request.headers.get("Content-Length") or 0)
        raw = request.rfile.read(length)
        sender = request.headers.get(SENDER_HEADER) or \
            f"http://{request.client_address[0]}/"
        status, payload, cid = self.receive(queue, raw, sender, sync)
        if status != 202 or cid is None:
            _respond(request, status, payload)
            return
        reply = self.connections.wait(cid, self.sync_timeout)
        if reply is None:
            _respond(request, 504, b"no reply before timeout\n")
        else:
            _respond(request, 200, xmltree.serialize(reply.body).encode() + b"\n",
                     "application/xml")

    def receive(self, queue: str, raw: bytes, sender: str,
                sync: bool = False) -> tuple[int, bytes, str | None]:
        """Parse and enqueue one inbound payload.

        Returns (http status, response payload, connection id or None).
        Malformed XML never enters the queue: a schema error message goes
        to the queue's error queue instead and the client gets a 400.
        """
        arrival = self._next_arrival(queue)
        try:
            body = xmltree.parse_document(raw)
        except XmlParseError as exc:
            self._reject(queue, raw, str(exc))
            return 400, f"malformed message: {exc}\n".encode(), None
        cid = uuid.uuid4().hex if sync else None
        system = {"Sender": sender, "ArrivalTime": arrival}
        if cid is not None:
            system["ConnectionId"] = cid
            self.connections.register(cid)
        try:
            for attempt in range(25):
                try:
                    with self.store.begin_txn() as txn:
                        mid = txn.enqueue_message(queue, body, system=system)
                        committed = txn.commit()
                    break
                except ConflictAbort:
                    # ingress only appends; it can lose solely against a
                    # concurrent slice reset, so retrying converges
                    if attempt == 24:
                        raise
        except Exception as exc:
            if cid is not None:
                self.connections.forget(cid)
            self._reject(queue, raw, str(exc))
            return 400, f"rejected: {exc}\n".encode(), None
        for msg in committed:
            self.scheduler.notify(msg)
        return 202, f"accepted as message {mid}\n".encode(), cid

    def _reject(self, queue: str, raw: bytes, description: str) -> None:
        target = resolve_error_queue(self.compiled, None, queue)
        with self.store.begin_txn() as txn:
            txn.enqueue_message(target, build_error_message(
                SCHEMA_ERROR, None, queue, description, raw,
                self.store.clock()))
            committed = txn.commit()
        for msg in committed:
            self.scheduler.notify(msg)


def _respond(request: BaseHTTPRequestHandler, status: int, payload: bytes,
             content_type: str = "text/plain") -> None:
    request.send_response(status)
    request.send_header("Content-Type", content_type)
    request.send_header("Content-Length", str(len(payload)))
    request.end_headers()
    request.wfile.write(payload)


# -- outbound delivery ---------------------------------------------------------


class DeliveryFailure(Exception):
    pass


def http_post(url: str, data: bytes, headers: dict, timeout: float = 10.0) -> int:
    req = urllib.request.Request(url, data=data, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status
    except urllib.error.HTTPError as exc:
        return exc.code
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise DeliveryFailure(str(exc)) from exc


class DeliveryWorker:
    """Resolves every message on an outgoing gateway queue exactly once.

    Resolution is: fulfilled sync connection, successful POST, or a
    permanent failure that produces a transport error message.  The
    delivered flag in the store makes resolution durable; attempt counts
    are not durable, so a crash can cause extra attempts (at-least-once).
    """

    def __init__(self, store: Store, compiled: CompiledApp,
                 scheduler: Scheduler, connections: ConnectionTable, *,
                 max_attempts: int = 5, backoff: float = 0.5,
                 post=http_post, sender_name: str | None = None):
        self.store = store
        self.compiled = compiled
        self.scheduler = scheduler
        self.connections = connections
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.post = post
        self.sender_name = sender_name
        self._state: dict[int, tuple[int, datetime]] = {}  # id -> (attempts, due)

    def _outgoing_queues(self) -> list[str]:
        return [q.name for q in self.store.app.queues
                if q.kind == QueueKind.OUTGOING_GATEWAY]

    def pending(self) -> list[Message]:
        snap = self.store.snapshot()
        out = []
        for name in self._outgoing_queues():
            for msg in snap.read_queue(name):
                if msg.id not in snap.delivered:
                    out.append(msg)
        out.sort(key=lambda m: m.seq)
        return out

    def tick(self, now: datetime | None = None) -> int:
        """Attempt every due undelivered message once; returns resolutions."""
        now = now or self.store.clock()
        resolved = 0
        for msg in self.pending():
            attempts, due = self._state.get(msg.id, (0, now))
            if due > now:
                continue
            if self._attempt(msg, attempts, now):
                resolved += 1
                self._state.pop(msg.id, None)
        return resolved

    def _attempt(self, msg: Message, attempts: int, now: datetime) -> bool:
        cid = msg.props.get("ConnectionId")
        if cid and self.connections.fulfill(cid, msg):
            self.store.mark_delivered(msg.id, True)
            return True
        qdesc = self.store.app.queue_map[msg.queue]
        url = qdesc.endpoint or msg.props.get("Recipient") \
            or msg.props.get("Sender")
        if not url:
            detail = ("connection is gone and no endpoint, Recipient or"
                      " Sender to fall back to" if cid
                      else "no endpoint, Recipient or Sender to deliver to")
            self._resolve_failed(msg, detail)
            return True
        headers = {"Content-Type": "application/xml"}
        if self.sender_name:
            headers[SENDER_HEADER] = self.sender_name
        try:
            status = self.post(url, xmltree.serialize(msg.body).encode(),
                               headers)
            failure = None if 200 <= status < 300 else f"HTTP {status}"
        except DeliveryFailure as exc:
            failure = str(exc)
        if failure is None:
            self.store.mark_delivered(msg.id, True)
            return True
        attempts += 1
        if attempts >= self.max_attempts:
            self._resolve_failed(
                msg, f"delivery to {url} failed after {attempts}"
                     f" attempt(s): {failure}")
            return True
        self._state[msg.id] = (
            attempts, now + timedelta(seconds=self.backoff * 2 ** (attempts - 1)))
        return False

    def _resolve_failed(self, msg: Message, description: str) -> None:
        target = resolve_error_queue(self.compiled, None, msg.queue)
        try:
            with self.store.begin_txn() as txn:
                txn.enqueue_message(target, build_error_message(
                    TRANSPORT_ERROR, None, msg.queue, description, msg.body,
                    self.store.clock()), trigger=msg)
                committed = txn.commit()
        except ConflictAbort:
            return  # still unresolved; the next tick tries again
        self.store.mark_delivered(msg.id, False)
        for m in committed:
            self.scheduler.notify(m)


# -- timers ---------------------------------------------------------------------


class EchoService:
    """Fires due messages on echo queues back to their EchoTarget."""

    def __init__(self, store: Store, compiled: CompiledApp,
                 scheduler: Scheduler):
        self.store = store
        self.compiled = compiled
        self.scheduler = scheduler

    def _echo_queues(self) -> list[str]:
        return [q.name for q in self.store.app.queues
                if q.kind == QueueKind.ECHO]

    def tick(self, now: datetime | None = None) -> int:
        """Fire every due timer; returns how many fired."""
        now = now or self.store.clock()
        fired = 0
        snap = self.store.snapshot()
        for name in self._echo_queues():
            for msg in snap.read_queue(name):
                if snap.is_processed(msg.id):
                    continue
                if self._fire(msg, now):
                    fired += 1
        return fired

    def _fire(self, msg: Message, now: datetime) -> bool:
        target = msg.props.get("EchoTarget")
        delay = msg.props.get("EchoDelay")
        if target is None or delay is None:
            self._fail(msg, "echo message lacks EchoTarget or EchoDelay")
            return True
        created = msg.props.get("CreationTime")
        if created is None or created + timedelta(seconds=int(delay)) > now:
            return False
        body = xmltree.make_document(xmltree.copy_node(msg.body))
        try:
            with self.store.begin_txn() as txn:
                txn.enqueue_message(target, body, trigger=msg)
                txn.mark_processed(msg.id)
                committed = txn.commit()
        except ConflictAbort:
            return False  # lost a race; fire on the next tick
        except Exception as exc:
            self._fail(msg, f"echo into {target} failed: {exc}")
            return True
        for m in committed:
            self.scheduler.notify(m)
        return True

    def _fail(self, msg: Message, description: str) -> None:
        errq = resolve_error_queue(self.compiled, None, msg.queue)
        try:
            with self.store.begin_txn() as txn:
                txn.enqueue_message(errq, build_error_message(
                    SYSTEM_ERROR, None, msg.queue, description, msg.body,
                    self.store.clock()), trigger=msg)
                txn.mark_processed(msg.id)
                committed = txn.commit()
        except ConflictAbort:
            return  # retried by the next tick
        for m in committed:
            self.scheduler.notify(m)
