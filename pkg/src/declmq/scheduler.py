"""Priority dispatch of unprocessed messages.

Dispatch order is (queue priority descending, commit order ascending):
strict priority between classes, FIFO inside one.  A transaction that
conflict-aborts is retried at the head of its priority class, keeping its
original commit-order rank; after ``max_retries`` attempts the message is
diverted to an error queue so one pathological message cannot wedge the
system.  Messages on echo queues are never dispatched to rules: their
processed flag belongs to the timer service.

With ``workers=1`` (the default) dispatch is fully deterministic for a
given store history, which the tests rely on.
"""

from __future__ import annotations

import heapq
import threading

from .applang import QueueKind
from .engine import (
    SYSTEM_ERROR,
    CompiledApp,
    build_error_message,
    process_message,
    resolve_error_queue,
)
from .errors import ConflictAbort, FatalError, UnresolvableErrorQueue
from .store import Message, Store


class Scheduler:
    def __init__(self, store: Store, compiled: CompiledApp, *,
                 workers: int = 1, max_retries: int = 100,
                 dispatch_log: list | None = None):
        self.store = store
        self.compiled = compiled
        self.workers = max(1, workers)
        self.max_retries = max_retries
        self.dispatch_log = [] if dispatch_log is None else dispatch_log
        self._mutex = threading.Lock()
        self._wake = threading.Condition(self._mutex)
        self._heap: list[tuple[int, int, int]] = []  # (-priority, seq, id)
        self._ready: set[int] = set()
        self._in_flight: set[int] = set()
        self._retries: dict[int, int] = {}
        for msg in store.unprocessed():
            self.notify(msg)

    # -- feeding -----------------------------------------------------------

    def notify(self, msg: Message) -> None:
        """Make a committed message eligible for dispatch. Idempotent."""
        qdesc = self.store.app.queue_map.get(msg.queue)
        if qdesc is None or qdesc.kind == QueueKind.ECHO:
            return
        with self._wake:
            if msg.id in self._ready or msg.id in self._in_flight:
                return
            if self.store.is_processed(msg.id):
                return
            self._ready.add(msg.id)
            heapq.heappush(self._heap, (-qdesc.priority, msg.seq, msg.id))
            self._wake.notify()

    def pending(self) -> int:
        with self._mutex:
            return len(self._ready) + len(self._in_flight)

    # -- dispatch ------------------------------------------------------------

    def _pop(self) -> tuple[int, int, int] | None:
        while self._heap:
            entry = heapq.heappop(self._heap)
            if entry[2] in self._ready:
                self._ready.discard(entry[2])
                return entry
        return None

    def step(self) -> bool:
        """Dispatch at most one message; False when nothing is ready."""
        with self._wake:
            entry = self._pop()
            if entry is None:
                return False
            neg_prio, seq, mid = entry
            self._in_flight.add(mid)
        msg = self.store.message(mid)
        try:
            result = process_message(self.store, self.compiled, mid)
        except ConflictAbort:
            self._retry(entry)
            return True
        except UnresolvableErrorQueue as exc:
            raise FatalError(str(exc)) from exc
        finally:
            with self._wake:
                self._in_flight.discard(mid)
        self._retries.pop(mid, None)
        if result.status == "processed" and msg is not None:
            self.dispatch_log.append((msg.queue, mid))
        for committed in result.committed:
            self.notify(committed)
        return True

    def _retry(self, entry: tuple[int, int, int]) -> None:
        mid = entry[2]
        with self._wake:
            self._in_flight.discard(mid)
            attempts = self._retries.get(mid, 0) + 1
            if attempts < self.max_retries:
                self._retries[mid] = attempts
                self._ready.add(mid)
                heapq.heappush(self._heap, entry)
                self._wake.notify()
                return
            self._retries.pop(mid, None)
        self._divert_starved(mid)

    def _divert_starved(self, mid: int) -> None:
        """Give up on a permanently conflicting message: error it out."""
        msg = self.store.message(mid)
        if msg is None or self.store.is_processed(mid):
            return
        target = resolve_error_queue(self.compiled, None, msg.queue)
        for _ in range(self.max_retries):
            try:
                with self.store.begin_txn() as txn:
                    body = build_error_message(
                        SYSTEM_ERROR, None, msg.queue,
                        f"gave up after {self.max_retries} conflict retries",
                        msg.body, self.store.clock())
                    txn.enqueue_message(target, body, trigger=msg)
                    txn.mark_processed(mid)
                    committed = txn.commit()
            except ConflictAbort:
                continue
            for m in committed:
                self.notify(m)
            return
        raise FatalError(f"could not divert starved message {mid}")

    def drain(self, limit: int | None = None) -> int:
        """Process ready messages until none remain; returns the count."""
        steps = 0
        while self.step():
            steps += 1
            if limit is not None and steps >= limit:
                break
        return steps

    # -- threaded operation -----------------------------------------------------

    def run(self, stop_event: threading.Event,
            idle_hooks: tuple = (), idle_interval: float = 0.05) -> None:
        """Run worker threads until ``stop_event`` is set.

        ``idle_hooks`` are callables invoked from this thread every
        ``idle_interval`` seconds (timers, delivery retries, gc).  A
        FatalError in any worker sets ``stop_event`` and re-raises here.
        """
        failures: list[BaseException] = []

        def worker():
            while not stop_event.is_set():
                try:
                    busy = self.step()
                except FatalError as exc:
                    failures.append(exc)
                    stop_event.set()
                    return
                if not busy:
                    with self._wake:
                        self._wake.wait(timeout=idle_interval)

        threads = [threading.Thread(target=worker, daemon=True,
                                    name=f"dispatch-{i}")
                   for i in range(self.workers)]
        for t in threads:
            t.start()
        try:
            while not stop_event.wait(timeout=idle_interval):
                for hook in idle_hooks:
                    hook()
        finally:
            stop_event.set()
            with self._wake:
                self._wake.notify_all()
            for t in threads:
                t.join(timeout=5)
        if failures:
            raise failures[0]
