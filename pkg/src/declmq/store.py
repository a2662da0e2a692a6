"""Transactional append-only message store.

Messages are immutable once enqueued; the only mutations are appending,
marking a message processed, and bumping a slice generation (``reset``).
All work happens inside a :class:`Txn`: reads go against the snapshot taken
at ``begin_txn``, writes are buffered, and commit performs optimistic
backward validation against transactions that committed in the meantime.
Two appends to the same queue or slice commute; anything involving a reset
of a slice another transaction read, appended to, or reset does not.

Durability: committed writes that touch persistent queues (and every reset)
are appended to ``log.N`` and fsynced before they become visible.  A
snapshot file ``snapshot.N+1`` plus a fresh ``log.N+1`` replaces the pair
atomically: recovery always uses the newest readable snapshot and only the
log co-numbered with it, so a crash between the two files loses nothing and
double-applies nothing.  Transient-queue messages skip the log entirely and
vanish on restart.

Slice membership: each message is stamped at enqueue with the current
generation of every slicing whose key property it carries.  A slice's
current content is exactly the unstamped-stale messages; reset bumps the
generation, emptying the slice without touching the messages themselves.
Garbage collection removes messages that are processed, current in no
slice, and (for outgoing gateway queues) already delivered.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal
from types import MappingProxyType
from typing import Any, Callable, Iterable

from . import wal, xmltree
from .applang import (
    ApplicationDef,
    QueueKind,
    QueueMode,
    coerce_value,
    parse_application,
)
from .errors import (
    AlreadyProcessed,
    ConflictAbort,
    FixedPropertyOverride,
    IncompatibleApplication,
    PropertyValueError,
    StoreError,
    StoreLocked,
    UnknownProperty,
    UnknownQueue,
    UnknownSlicing,
)
from .qml.evaluator import EvalContext, atomize, evaluate
from .sysprops import RESERVED

Clock = Callable[[], datetime]


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class Message:
    """An immutable enqueued message.

    ``seq`` is the global commit-order position and defines enqueue order
    within each queue and slice.  ``slice_stamps`` maps slicing name to the
    slice generation current when the message was enqueued; the message is
    in that slice for as long as the generation has not been bumped.
    """

    id: int
    queue: str
    body: xmltree.Document
    props: MappingProxyType
    seq: int
    creating_rule: str | None = None
    slice_stamps: MappingProxyType = MappingProxyType({})

    @property
    def created_at(self) -> datetime | None:
        return self.props.get("CreationTime")


def _message_payload(m: Message) -> dict:
    return {
        "id": m.id,
        "q": m.queue,
        "seq": m.seq,
        "body": xmltree.serialize(m.body),
        "props": {k: wal.pack_atomic(v) for k, v in m.props.items()},
        "rule": m.creating_rule,
        "stamps": dict(m.slice_stamps),
    }


def _message_from_payload(d: dict) -> Message:
    return Message(
        id=d["id"],
        queue=d["q"],
        seq=d["seq"],
        body=xmltree.parse_document(d["body"]),
        props=MappingProxyType(
            {k: wal.unpack_atomic(v) for k, v in d["props"].items()}
        ),
        creating_rule=d.get("rule"),
        slice_stamps=MappingProxyType({k: int(v) for k, v in d["stamps"].items()}),
    )


class StoreSnapshot:
    """A consistent, immutable view of the whole store."""

    __slots__ = ("app", "msgs", "queues", "slice_gens", "slice_index",
                 "processed", "delivered")

    def __init__(self, app, msgs, queues, slice_gens, slice_index,
                 processed, delivered):
        self.app = app
        self.msgs = msgs
        self.queues = queues
        self.slice_gens = slice_gens
        self.slice_index = slice_index
        self.processed = processed
        self.delivered = delivered

    def get(self, message_id: int) -> Message | None:
        return self.msgs.get(message_id)

    def read_queue(self, name: str) -> list[Message]:
        if name not in self.app.queue_map:
            raise UnknownQueue(name)
        return [self.msgs[i] for i in self.queues.get(name, ())]

    def read_slice(self, slicing: str, key) -> list[Message]:
        if slicing not in self.app.slicing_map:
            raise UnknownSlicing(slicing)
        return [self.msgs[i] for i in self.slice_index.get((slicing, key), ())]

    def generation(self, slicing: str, key) -> int:
        return self.slice_gens.get((slicing, key), 0)

    def is_processed(self, message_id: int) -> bool:
        return message_id in self.processed

    def is_delivered(self, message_id: int) -> bool:
        return self.delivered.get(message_id, False)


@dataclass(frozen=True)
class _Footprint:
    appended_queues: frozenset
    appended_slices: frozenset
    resets: frozenset


@dataclass
class _Pending:
    id: int
    queue: str
    body: xmltree.Document
    props: dict
    creating_rule: str | None
    stamps: dict


class _MessageProto:
    """Stand-in for the message being built, used while evaluating
    computed property clauses (its properties are not resolved yet)."""

    __slots__ = ("body", "props", "queue")

    def __init__(self, body, queue):
        self.body = body
        self.props = {}
        self.queue = queue


def _resolve_properties(app: ApplicationDef, queue: str, body: xmltree.Document,
                        explicit: Iterable, trigger: Message | None,
                        creating_rule: str | None, system: dict | None,
                        clock: Clock, read_view) -> dict:
    """Compute the full property set for a new message.

    Precedence per property: fixed clause value, then explicit ``with``
    value, then inheritance from the triggering message, then the clause
    value, then system-supplied values.  A property that resolves to the
    empty sequence is simply absent.
    """
    declared = app.property_map
    explicit_map: dict[str, Any] = {}
    for name, value in explicit:
        explicit_map[name] = value
    for name in explicit_map:
        if name in declared:
            if declared[name].fixed:
                raise FixedPropertyOverride(
                    f"property {name} is fixed and cannot be assigned at enqueue"
                )
        elif name in RESERVED:
            if not RESERVED[name].settable:
                raise FixedPropertyOverride(
                    f"property {name} is system-managed and cannot be assigned"
                )
        else:
            raise UnknownProperty(name)

    known = frozenset(declared) | frozenset(RESERVED)
    props: dict[str, Any] = {}

    def clause_value(prop, clause):
        value = clause.value
        if isinstance(value, (str, bool, int, Decimal)):
            return coerce_value(prop.value_type, value, f"property {prop.name}")
        ctx = EvalContext(
            message=_MessageProto(body, queue),
            snapshot=read_view,
            clock=clock,
            known_properties=known,
            context_item=body,
        )
        items, _updates = evaluate(value, ctx)
        items = atomize(items)
        if not items:
            return None
        if len(items) > 1:
            raise PropertyValueError(
                f"property {prop.name}: value expression produced {len(items)} items"
            )
        return coerce_value(prop.value_type, items[0], f"property {prop.name}")

    for prop in app.properties:
        clause = prop.clause_for(queue)
        if prop.fixed and clause is not None:
            value = clause_value(prop, clause)
        elif prop.name in explicit_map:
            value = coerce_value(prop.value_type, explicit_map[prop.name],
                                 f"property {prop.name}")
        elif prop.inherited and trigger is not None and prop.name in trigger.props:
            value = trigger.props[prop.name]
        elif clause is not None:
            value = clause_value(prop, clause)
        else:
            value = None
        if value is not None:
            props[prop.name] = value

    for name, rp in RESERVED.items():
        if name in explicit_map:
            props[name] = coerce_value(rp.value_type, explicit_map[name],
                                       f"property {name}")
        elif rp.propagated and trigger is not None and name in trigger.props:
            props[name] = trigger.props[name]
        elif system is not None and name in system:
            props[name] = coerce_value(rp.value_type, system[name],
                                       f"property {name}")

    props["CreationTime"] = clock()
    if creating_rule is not None:
        props["CreatingRule"] = creating_rule
    return props


class Txn:
    """One unit of work: snapshot reads plus buffered writes.

    Reads performed through the transaction (``read_queue``/``read_slice``)
    are tracked as the conflict footprint; they never observe the
    transaction's own buffered writes, so every evaluation inside one
    transaction sees the same state.
    """

    def __init__(self, store: "Store", snapshot: StoreSnapshot, start: int):
        self._store = store
        self.snapshot = snapshot
        self._start = start
        self._ops: list[tuple] = []
        self._local_gens: dict = {}
        self._reads_q: set[str] = set()
        self._reads_s: set[tuple] = set()
        self._appended_q: set[str] = set()
        self._appended_s: set[tuple] = set()
        self._resets: set[tuple] = set()
        self._marks: set[int] = set()
        self._done = False

    # -- reads (footprint-tracked) --------------------------------------

    def read_queue(self, name: str) -> list[Message]:
        messages = self.snapshot.read_queue(name)
        self._reads_q.add(name)
        return messages

    def read_slice(self, slicing: str, key) -> list[Message]:
        messages = self.snapshot.read_slice(slicing, key)
        self._reads_s.add((slicing, key))
        return messages

    # -- writes (buffered) ----------------------------------------------

    def _gen(self, slicing: str, key) -> int:
        gk = (slicing, key)
        if gk in self._local_gens:
            return self._local_gens[gk]
        return self.snapshot.generation(slicing, key)

    def enqueue_message(self, queue: str, body: xmltree.Document, explicit=(),
                        *, trigger: Message | None = None,
                        creating_rule: str | None = None,
                        system: dict | None = None) -> int:
        self._check_open()
        app = self._store.app
        qdesc = app.queue_map.get(queue)
        if qdesc is None:
            raise UnknownQueue(queue)
        if not isinstance(body, xmltree.Document):
            raise TypeError("message body must be a sealed Document")
        props = _resolve_properties(app, queue, body, explicit, trigger,
                                    creating_rule, system, self._store.clock,
                                    self)
        stamps: dict[str, int] = {}
        for slicing in app.slicings:
            if slicing.property_name in props:
                key = props[slicing.property_name]
                stamps[slicing.name] = self._gen(slicing.name, key)
                self._appended_s.add((slicing.name, key))
        mid = self._store._allocate_id()
        self._ops.append(("enqueue", _Pending(mid, queue, body, props,
                                              creating_rule, stamps)))
        self._appended_q.add(queue)
        return mid

    def mark_processed(self, message_id: int) -> None:
        self._check_open()
        if self.snapshot.get(message_id) is None:
            raise StoreError(f"unknown message {message_id}")
        if self.snapshot.is_processed(message_id) or message_id in self._marks:
            raise AlreadyProcessed(f"message {message_id} is already processed")
        self._marks.add(message_id)
        self._ops.append(("mark", message_id))

    def reset_slice(self, slicing: str, key) -> None:
        self._check_open()
        if slicing not in self._store.app.slicing_map:
            raise UnknownSlicing(slicing)
        gk = (slicing, key)
        self._local_gens[gk] = self._gen(slicing, key) + 1
        self._resets.add(gk)
        self._ops.append(("reset", slicing, key))

    # -- partial rollback -------------------------------------------------

    def savepoint(self) -> tuple:
        # Reads are deliberately not captured: a rolled-back branch still
        # observed the snapshot, so its reads stay in the footprint.
        return (len(self._ops), dict(self._local_gens), set(self._appended_q),
                set(self._appended_s), set(self._resets), set(self._marks))

    def rollback_to(self, sp: tuple) -> None:
        n, gens, aq, asl, rst, marks = sp
        del self._ops[n:]
        self._local_gens = gens
        self._appended_q = aq
        self._appended_s = asl
        self._resets = rst
        self._marks = marks

    # -- lifecycle --------------------------------------------------------

    def commit(self) -> list[Message]:
        self._check_open()
        self._done = True
        return self._store._commit(self)

    def abort(self) -> None:
        self._done = True
        self._store._forget(self)

    def _check_open(self) -> None:
        if self._done:
            raise StoreError("transaction already finished")

    def __enter__(self) -> "Txn":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if not self._done:
            self.abort()


class Store:
    """The live store: in-memory state backed by log and snapshot files."""

    def __init__(self, directory: str, app: ApplicationDef, *,
                 clock: Clock | None = None,
                 failpoint: wal.Failpoint | None = None,
                 read_only: bool = False, _lockless: bool = False):
        self.directory = directory
        self.app = app
        self.clock = clock or utc_now
        self.read_only = read_only
        self._failpoint = failpoint
        self._mutex = threading.RLock()
        self._lock_path: str | None = None
        if not read_only and not _lockless:
            self._lock_path = _acquire_lock(directory)
        try:
            self._msgs: dict[int, Message] = {}
            self._queues: dict[str, list[int]] = {}
            self._slice_gens: dict[tuple, int] = {}
            self._slice_index: dict[tuple, list[int]] = {}
            self._processed: set[int] = set()
            self._delivered: dict[int, bool] = {}
            self._next_id = 1
            self._next_seq = 1
            self._next_txn = 1
            self._commit_counter = 0
            self._snap_no = 0
            self._active: dict[Txn, int] = {}
            self._recent: list[tuple[int, _Footprint]] = []
            self._recover()
            self._log: wal.LogWriter | None = None
            if not read_only:
                self._log = wal.LogWriter(self._log_path(self._snap_no),
                                          failpoint)
        except BaseException:
            self._release_lock()
            raise

    # -- paths -------------------------------------------------------------

    def _log_path(self, number: int) -> str:
        return os.path.join(self.directory, f"log.{number}")

    def _is_persistent(self, queue: str) -> bool:
        qdesc = self.app.queue_map.get(queue)
        return qdesc is None or qdesc.mode == QueueMode.PERSISTENT

    # -- recovery ------------------------------------------------------------

    def _recover(self) -> None:
        number, body = wal.load_latest_snapshot(self.directory)
        self._snap_no = number
        if body is not None:
            self._next_id = body["next_id"]
            self._next_seq = body["next_seq"]
            for payload in body["messages"]:
                m = _message_from_payload(payload)
                self._msgs[m.id] = m
            for sname, packed, gen in body["gens"]:
                self._slice_gens[(sname, wal.unpack_atomic(packed))] = gen
            self._processed = set(body["processed"])
            self._delivered = {mid: ok for mid, ok in body["delivered"]}
        for m in sorted(self._msgs.values(), key=lambda m: m.seq):
            self._queues.setdefault(m.queue, []).append(m.id)
            self._index_message(m)
        log_path = self._log_path(number)
        max_txn = 0
        if os.path.exists(log_path):
            pending: dict[int, list[dict]] = {}
            for rec in wal.read_log(log_path):
                kind = rec["t"]
                if kind == wal.DELIVERED:
                    self._delivered[rec["id"]] = rec["ok"]
                    continue
                txn = rec["txn"]
                max_txn = max(max_txn, txn)
                if kind == wal.TXN_COMMIT:
                    for r in pending.pop(txn, ()):
                        self._replay(r)
                else:
                    pending.setdefault(txn, []).append(rec)
        self._next_txn = max_txn + 1

    def _replay(self, rec: dict) -> None:
        kind = rec["t"]
        if kind == wal.ENQUEUE:
            m = _message_from_payload(rec)
            self._msgs[m.id] = m
            self._queues.setdefault(m.queue, []).append(m.id)
            self._index_message(m)
            self._next_seq = max(self._next_seq, m.seq + 1)
            self._next_id = max(self._next_id, m.id + 1)
        elif kind == wal.MARK_PROCESSED:
            self._processed.add(rec["id"])
        elif kind == wal.RESET:
            gk = (rec["s"], wal.unpack_atomic(rec["key"]))
            self._slice_gens[gk] = self._slice_gens.get(gk, 0) + 1
            self._slice_index.pop(gk, None)

    def _index_message(self, m: Message) -> None:
        for sname, stamp in m.slice_stamps.items():
            sdef = self.app.slicing_map.get(sname)
            if sdef is None:
                continue
            key = m.props.get(sdef.property_name)
            if key is None:
                continue
            if stamp == self._slice_gens.get((sname, key), 0):
                self._slice_index.setdefault((sname, key), []).append(m.id)

    # -- transactions --------------------------------------------------------

    def begin_txn(self) -> Txn:
        if self.read_only:
            raise StoreError("store is opened read-only")
        with self._mutex:
            txn = Txn(self, self._snapshot_locked(), self._commit_counter)
            self._active[txn] = self._commit_counter
            return txn

    def snapshot(self) -> StoreSnapshot:
        with self._mutex:
            return self._snapshot_locked()

    def _snapshot_locked(self) -> StoreSnapshot:
        return StoreSnapshot(
            app=self.app,
            msgs=dict(self._msgs),
            queues={q: tuple(ids) for q, ids in self._queues.items()},
            slice_gens=dict(self._slice_gens),
            slice_index={k: tuple(v) for k, v in self._slice_index.items()},
            processed=frozenset(self._processed),
            delivered=dict(self._delivered),
        )

    def _allocate_id(self) -> int:
        with self._mutex:
            mid = self._next_id
            self._next_id += 1
            return mid

    def _forget(self, txn: Txn) -> None:
        with self._mutex:
            self._active.pop(txn, None)

    def _commit(self, txn: Txn) -> list[Message]:
        with self._mutex:
            try:
                self._validate(txn)
                return self._apply(txn)
            finally:
                self._active.pop(txn, None)
                self._prune_recent()

    def _validate(self, txn: Txn) -> None:
        for stamp, fp in self._recent:
            if stamp <= txn._start:
                continue
            if (txn._reads_q & fp.appended_queues
                    or txn._reads_s & (fp.appended_slices | fp.resets)
                    or txn._resets & (fp.resets | fp.appended_slices)
                    or txn._appended_s & fp.resets):
                raise ConflictAbort(
                    "transaction footprint overlaps a concurrent commit"
                )
        for mid in txn._marks:
            if mid in self._processed:
                raise ConflictAbort(f"message {mid} was processed concurrently")

    def _apply(self, txn: Txn) -> list[Message]:
        seq = self._next_seq
        overlay: dict[tuple, int] = {}

        def gen_of(gk):
            return overlay.get(gk, self._slice_gens.get(gk, 0))

        records: list[dict] = []
        mem_ops: list[tuple] = []
        committed: list[Message] = []
        for op in txn._ops:
            if op[0] == "enqueue":
                p: _Pending = op[1]
                msg = Message(
                    id=p.id, queue=p.queue, body=p.body,
                    props=MappingProxyType(dict(p.props)), seq=seq,
                    creating_rule=p.creating_rule,
                    slice_stamps=MappingProxyType(dict(p.stamps)),
                )
                seq += 1
                index_keys = []
                for sname, stamp in msg.slice_stamps.items():
                    key = msg.props[self.app.slicing_map[sname].property_name]
                    gk = (sname, key)
                    if stamp == gen_of(gk):
                        index_keys.append(gk)
                mem_ops.append(("msg", msg, index_keys))
                committed.append(msg)
                if self._is_persistent(msg.queue):
                    records.append({"t": wal.ENQUEUE, "txn": self._next_txn,
                                    **_message_payload(msg)})
            elif op[0] == "mark":
                mid = op[1]
                mem_ops.append(("mark", mid))
                m = self._msgs.get(mid)
                if m is not None and self._is_persistent(m.queue):
                    records.append({"t": wal.MARK_PROCESSED,
                                    "txn": self._next_txn, "id": mid})
            else:  # reset
                _, sname, key = op
                gk = (sname, key)
                overlay[gk] = gen_of(gk) + 1
                mem_ops.append(("reset", gk, overlay[gk]))
                records.append({"t": wal.RESET, "txn": self._next_txn,
                                "s": sname, "key": wal.pack_atomic(key)})

        if records:
            records.append({"t": wal.TXN_COMMIT, "txn": self._next_txn})
            assert self._log is not None
            for rec in records:
                self._log.append(rec)
            self._log.sync()
        self._next_txn += 1

        # Durable (or transient-only): now make it visible.
        for mop in mem_ops:
            if mop[0] == "msg":
                _, msg, index_keys = mop
                self._msgs[msg.id] = msg
                self._queues.setdefault(msg.queue, []).append(msg.id)
                for gk in index_keys:
                    self._slice_index.setdefault(gk, []).append(msg.id)
            elif mop[0] == "mark":
                self._processed.add(mop[1])
            else:
                _, gk, gen = mop
                self._slice_gens[gk] = gen
                self._slice_index.pop(gk, None)
        self._next_seq = seq
        self._commit_counter += 1
        self._recent.append((self._commit_counter, _Footprint(
            frozenset(txn._appended_q),
            frozenset(txn._appended_s),
            frozenset(txn._resets),
        )))
        return committed

    def _prune_recent(self) -> None:
        floor = min(self._active.values(), default=self._commit_counter)
        self._recent = [(s, fp) for s, fp in self._recent if s > floor]

    # -- delivery bookkeeping -------------------------------------------------

    def mark_delivered(self, message_id: int, ok: bool = True) -> None:
        with self._mutex:
            self._delivered[message_id] = ok
            m = self._msgs.get(message_id)
            if m is not None and self._is_persistent(m.queue) and self._log:
                self._log.append({"t": wal.DELIVERED, "id": message_id,
                                  "ok": ok})
                self._log.sync()

    def is_delivered(self, message_id: int) -> bool:
        with self._mutex:
            return self._delivered.get(message_id, False)

    # -- garbage collection and snapshots --------------------------------------

    def garbage_collect(self) -> int:
        """Drop every message that no future evaluation can observe."""
        with self._mutex:
            removable = []
            for mid, m in self._msgs.items():
                if mid not in self._processed:
                    continue
                qdesc = self.app.queue_map.get(m.queue)
                if (qdesc is not None
                        and qdesc.kind == QueueKind.OUTGOING_GATEWAY
                        and mid not in self._delivered):
                    continue  # delivery not yet resolved either way
                live = False
                for sname, stamp in m.slice_stamps.items():
                    sdef = self.app.slicing_map.get(sname)
                    if sdef is None:
                        continue
                    key = m.props.get(sdef.property_name)
                    if key is None:
                        continue
                    if stamp == self._slice_gens.get((sname, key), 0):
                        live = True
                        break
                if not live:
                    removable.append(mid)
            if not removable:
                return 0
            dead = set(removable)
            for mid in removable:
                del self._msgs[mid]
                self._processed.discard(mid)
                self._delivered.pop(mid, None)
            self._queues = {q: [i for i in ids if i not in dead]
                            for q, ids in self._queues.items()}
            self._slice_index = {k: [i for i in ids if i not in dead]
                                 for k, ids in self._slice_index.items()}
            if not self.read_only:
                self.write_snapshot_file()
            return len(removable)

    def write_snapshot_file(self) -> None:
        """Write a full snapshot and start a fresh co-numbered log."""
        with self._mutex:
            body = self._persistent_state()
            new_no = self._snap_no + 1
            wal.write_snapshot(self.directory, new_no, body, self._failpoint)
            if self._log is not None:
                self._log.close()
            self._log = wal.LogWriter(self._log_path(new_no), self._failpoint)
            old_no = self._snap_no
            self._snap_no = new_no
            wal.drop_old_snapshots(self.directory, new_no)
            old_log = self._log_path(old_no)
            if os.path.exists(old_log):
                os.unlink(old_log)

    def _persistent_state(self) -> dict:
        keep = [m for m in sorted(self._msgs.values(), key=lambda m: m.seq)
                if self._is_persistent(m.queue)]
        ids = {m.id for m in keep}
        return {
            "next_id": self._next_id,
            "next_seq": self._next_seq,
            "messages": [_message_payload(m) for m in keep],
            "gens": [[s, wal.pack_atomic(k), g]
                     for (s, k), g in self._slice_gens.items()],
            "processed": sorted(i for i in self._processed if i in ids),
            "delivered": [[i, ok] for i, ok in sorted(self._delivered.items())
                          if i in ids],
        }

    # -- convenience reads ------------------------------------------------------

    def unprocessed(self) -> list[Message]:
        """All unprocessed messages in commit order."""
        with self._mutex:
            return [m for m in sorted(self._msgs.values(), key=lambda m: m.seq)
                    if m.id not in self._processed]

    def message(self, message_id: int) -> Message | None:
        with self._mutex:
            return self._msgs.get(message_id)

    def is_processed(self, message_id: int) -> bool:
        with self._mutex:
            return message_id in self._processed

    # -- lifecycle ----------------------------------------------------------------

    def close(self) -> None:
        with self._mutex:
            if self._log is not None:
                self._log.close()
                self._log = None
        self._release_lock()

    def _release_lock(self) -> None:
        if self._lock_path is not None:
            try:
                os.unlink(self._lock_path)
            except FileNotFoundError:
                pass
            self._lock_path = None

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


# -- store directory management ----------------------------------------------


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _acquire_lock(directory: str) -> str:
    path = os.path.join(directory, "lock")
    for _ in range(3):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            try:
                with open(path) as fh:
                    pid = int(fh.read().strip() or "0")
            except (OSError, ValueError):
                pid = 0
            # A dead pid is a stale lock; our own pid means an earlier
            # handle in this process died without releasing (crash tests).
            if pid > 0 and pid != os.getpid() and _pid_alive(pid):
                raise StoreLocked(f"{directory}: locked by running pid {pid}")
            try:
                os.unlink(path)
            except FileNotFoundError:
                pass
            continue
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        return path
    raise StoreLocked(f"{directory}: could not acquire lock")


def deploy_application(directory: str, source: str,
                       app: ApplicationDef | None = None) -> None:
    """Install (or replace) the application for a store directory.

    Replacing is refused when an existing queue changes kind or mode, or
    when a queue that still holds messages disappears.
    """
    os.makedirs(directory, exist_ok=True)
    if app is None:
        app = parse_application(source)
    lock = _acquire_lock(directory)
    try:
        old = wal.load_manifest(directory)
        if old is not None:
            removed = []
            for name, meta in old["queues"].items():
                new_q = app.queue_map.get(name)
                if new_q is None:
                    removed.append(name)
                elif (new_q.kind.value, new_q.mode.value) != (meta["kind"],
                                                              meta["mode"]):
                    raise IncompatibleApplication(
                        f"queue {name} changed from {meta['kind']}/{meta['mode']}"
                        f" to {new_q.kind.value}/{new_q.mode.value}"
                    )
            if removed:
                old_app = parse_application(old["application"])
                state = Store(directory, old_app, _lockless=True,
                              read_only=True)
                try:
                    for name in removed:
                        if state._queues.get(name):
                            raise IncompatibleApplication(
                                f"queue {name} was removed but still holds"
                                " messages"
                            )
                finally:
                    state.close()
        wal.write_manifest(
            directory, source,
            {q.name: {"kind": q.kind.value, "mode": q.mode.value}
             for q in app.queues},
        )
    finally:
        try:
            os.unlink(lock)
        except FileNotFoundError:
            pass


def open_store(directory: str, *, clock: Clock | None = None,
               failpoint: wal.Failpoint | None = None,
               read_only: bool = False) -> Store:
    """Open a deployed store directory, replaying whatever survives."""
    manifest = wal.load_manifest(directory)
    if manifest is None:
        raise StoreError(f"{directory}: no application deployed here")
    app = parse_application(manifest["application"])
    return Store(directory, app, clock=clock, failpoint=failpoint,
                 read_only=read_only)
