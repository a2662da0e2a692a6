"""Shared fixtures: a controllable clock, store factories, drain helpers."""

from __future__ import annotations

import itertools
import re
from datetime import datetime, timedelta, timezone

import pytest

from declmq import applang, engine, scheduler as sched, store as store_mod

# acceptance criteria get one printed verdict line each, see
# pytest_terminal_summary below
_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)",
                      report.nodeid)
    if match is None:
        return
    number = int(match.group(1))
    label = match.group(2).replace("_", " ")
    if report.passed:
        outcome = "PASS"
    elif report.skipped:
        outcome = "SKIP"
    else:
        outcome = "FAIL"
    _CRITERIA[number] = (label, outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        label, outcome = _CRITERIA[number]
        terminalreporter.write_line(
            f"criterion {number:2d} ({label}): {outcome}")


class FakeClock:
    """Deterministic clock; every call advances by a fixed tick."""

    def __init__(self, start: str = "2024-01-01T00:00:00", tick: float = 0.001):
        self.now = datetime.fromisoformat(start).replace(tzinfo=timezone.utc)
        self.tick = timedelta(seconds=tick)

    def __call__(self) -> datetime:
        current = self.now
        self.now = current + self.tick
        return current

    def advance(self, seconds: float) -> None:
        self.now = self.now + timedelta(seconds=seconds)


@pytest.fixture
def clock():
    return FakeClock()


_COUNTER = itertools.count()


@pytest.fixture
def store_factory(tmp_path, clock):
    """Deploy ``source`` into a fresh directory and open the store."""

    def make(source: str, *, directory=None, clock_override=None):
        directory = directory or str(tmp_path / f"store{next(_COUNTER)}")
        store_mod.deploy_application(directory, source)
        return store_mod.open_store(directory, clock=clock_override or clock)

    return make


def compile_source(source: str) -> engine.CompiledApp:
    return engine.compile_ruleset(applang.parse_application(source))


def drain(store, compiled, **kwargs) -> list:
    """Process every pending message serially; returns the dispatch log."""
    log: list = []
    sched.Scheduler(store, compiled, dispatch_log=log, **kwargs).drain()
    return log


def queue_bodies(store, queue: str) -> list[str]:
    from declmq import xmltree

    return [xmltree.serialize(m.body.root) for m in store.snapshot().read_queue(queue)]
