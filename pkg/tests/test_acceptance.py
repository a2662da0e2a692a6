"""End-to-end acceptance criteria.

Each test covers one numbered criterion; the conftest hook prints one
PASS/FAIL line per criterion in the terminal summary.
"""

from __future__ import annotations

import itertools
import random
import time
from datetime import datetime, timedelta, timezone

import pytest

import oracles
from conftest import FakeClock, compile_source
from declmq import xmltree as x
from declmq.errors import FixedPropertyOverride
from declmq.gateways import ConnectionTable, DeliveryWorker, EchoService
from declmq.qml.evaluator import EvalContext, evaluate
from declmq.qml.parser import parse_expression
from declmq.scheduler import Scheduler
from declmq.store import deploy_application, open_store
from declmq.wal import InjectedFailure
from oracles import SliceOracle


def doc(text: str) -> x.Document:
    return x.parse_document(text)


def put(store, queue: str, body_text: str, explicit=(), trigger=None):
    with store.begin_txn() as txn:
        mid = txn.enqueue_message(queue, doc(body_text), explicit=explicit,
                                  trigger=trigger)
        txn.commit()
    return mid


def bodies(store, queue: str) -> list[str]:
    return [x.serialize(m.body.root)
            for m in store.snapshot().read_queue(queue)]


def drain(store, compiled, **kwargs) -> list:
    log: list = []
    Scheduler(store, compiled, dispatch_log=log, **kwargs).drain()
    return log


def make_crasher(budget: int):
    """Failpoint: allow ``budget`` log bytes, then cut the fatal write."""
    state = {"left": budget}

    def failpoint(data: bytes):
        state["left"] -= len(data)
        if state["left"] <= 0:
            return max(0, len(data) + state["left"])
        return None

    return failpoint


# ---------------------------------------------------------------------------
# criterion 1: request fan-out, keyed join, slice cleanup


PROCUREMENT = """
create queue crm kind basic
create queue customer kind basic
create queue finance kind basic
create queue legal kind basic
create queue supplier kind basic
create queue systemErrors kind basic

create property requestID as xs:string fixed
  queue crm, customer value //requestID

create slicing requestMsgs on requestID

create rule newOfferRequest for crm
  if (//offerRequest) then
  let $customerInfo :=
      <requestCustomerInfo>{//requestID}{//customerID}</requestCustomerInfo>
  let $exportRestrictionInfo :=
      <requestExportRestrictions>{//requestID}{//items}</requestExportRestrictions>
  let $plantCapacityInfo :=
      <requestPlantCapacity>{//requestID}{//items}</requestPlantCapacity>
  return
    do enqueue $customerInfo into finance,
    do enqueue $exportRestrictionInfo into legal,
    do enqueue $plantCapacityInfo into supplier
      with Sender value "http://ws.chem.invalid/"

create rule joinOrder for requestMsgs
  if (qs:slice()[/customerInfoResult] and qs:slice()[/restrictionsResult]
      and qs:slice()[/capacityResult]
      and not(qs:slice()[/offer] or qs:slice()[/refusal])) then
  if (qs:slice()[/customerInfoResult/accept]
      and not(qs:slice()[/restrictionsResult//restrictedItem])
      and qs:slice()[/capacityResult//accept]) then
    let $pricelist := collection("crm")[/pricelist]
    let $request := qs:queue("crm")/offerRequest
    let $items := $request[//requestID = qs:slicekey()]/items
    let $offer := <offer>{//requestID}{$items}</offer>
    return do enqueue $offer into customer
  else
    do enqueue <refusal>{//requestID}</refusal> into customer

create rule cleanupRequest for requestMsgs
  if (qs:slice()/offer or qs:slice()/refusal) then do reset
"""

OFFER_REQUEST = (
    "<offerRequest><requestID>r1</requestID><customerID>c9</customerID>"
    "<items><item>acetone</item></items></offerRequest>"
)

CHECKS_ACCEPT = {
    "info": "<customerInfoResult><requestID>r1</requestID>"
            "<customerID>c9</customerID><accept/></customerInfoResult>",
    "restrict": "<restrictionsResult><requestID>r1</requestID>"
                "</restrictionsResult>",
    "capacity": "<capacityResult><requestID>r1</requestID><accept/>"
                "</capacityResult>",
}

CREDIT_CHECK = """
create queue finance kind basic
create queue crm kind basic
create queue invoices kind basic
create queue systemErrors kind basic

create rule checkCreditRating for finance
  if (/requestCustomerInfo) then
  let $unpaid := collection("invoices")[//customerID = qs:message()//customerID]
  return
    if ($unpaid) then
      do enqueue <customerInfoResult>{//requestID}<reject/></customerInfoResult>
        into crm
    else
      do enqueue <customerInfoResult>{//requestID}<accept/></customerInfoResult>
        into crm
"""


def run_procurement(store_factory, checks: dict, order: tuple[str, ...]):
    """One full request: fan out, inject checks in ``order``, settle."""
    started = time.monotonic()
    store = store_factory(PROCUREMENT)
    compiled = compile_source(PROCUREMENT)
    put(store, "crm", OFFER_REQUEST)
    drain(store, compiled)

    forks = {q: bodies(store, q) for q in ("finance", "legal", "supplier")}
    for name in order:
        put(store, "crm", checks[name])
        drain(store, compiled)

    snap = store.snapshot()
    customer = snap.read_queue("customer")
    state = {
        "forks": forks,
        "supplier_sender": snap.read_queue("supplier")[0].props.get("Sender"),
        "customer": [x.serialize(m.body.root) for m in customer],
        "slice": [m.id for m in snap.read_slice("requestMsgs", "r1")],
        "generation": snap.generation("requestMsgs", "r1"),
        "system_errors": len(snap.read_queue("systemErrors")),
        "elapsed": time.monotonic() - started,
    }
    store.close()
    return state


def test_criterion_01_request_fan_out_and_keyed_join(store_factory):
    expected_forks = {
        "finance": ["<requestCustomerInfo><requestID>r1</requestID>"
                    "<customerID>c9</customerID></requestCustomerInfo>"],
        "legal": ["<requestExportRestrictions><requestID>r1</requestID>"
                  "<items><item>acetone</item></items>"
                  "</requestExportRestrictions>"],
        "supplier": ["<requestPlantCapacity><requestID>r1</requestID>"
                     "<items><item>acetone</item></items>"
                     "</requestPlantCapacity>"],
    }
    expected_offer = ("<offer><requestID>r1</requestID>"
                      "<items><item>acetone</item></items></offer>")

    # every arrival order of the three check results settles the same way
    for order in itertools.permutations(("info", "restrict", "capacity")):
        state = run_procurement(store_factory, CHECKS_ACCEPT, order)
        assert state["elapsed"] < 5.0, f"order {order} took too long"
        assert state["forks"] == expected_forks, order
        assert state["supplier_sender"] == "http://ws.chem.invalid/"
        assert state["customer"] == [expected_offer], order
        assert state["slice"] == [], order
        assert state["generation"] >= 1, order
        assert state["system_errors"] == 0, order

    # any failed check turns the answer into a refusal, still exactly one
    refusals = [
        dict(CHECKS_ACCEPT,
             info=CHECKS_ACCEPT["info"].replace("<accept/>", "<reject/>")),
        dict(CHECKS_ACCEPT,
             restrict="<restrictionsResult><requestID>r1</requestID>"
                      "<restrictedItem>acetone</restrictedItem>"
                      "</restrictionsResult>"),
        dict(CHECKS_ACCEPT,
             capacity="<capacityResult><requestID>r1</requestID>"
                      "<decline/></capacityResult>"),
    ]
    for checks in refusals:
        state = run_procurement(store_factory, checks,
                                ("info", "restrict", "capacity"))
        assert state["customer"] == ["<refusal><requestID>r1</requestID>"
                                     "</refusal>"]
        assert state["slice"] == [] and state["generation"] >= 1

    # the finance leg: an open invoice for the customer means rejection
    for invoices, verdict in [(["<invoice><customerID>c9</customerID>"
                                "<amount>250</amount></invoice>"], "reject"),
                              ([], "accept")]:
        store = store_factory(CREDIT_CHECK)
        compiled = compile_source(CREDIT_CHECK)
        for invoice in invoices:
            put(store, "invoices", invoice)
        put(store, "finance", expected_forks["finance"][0])
        drain(store, compiled)
        assert bodies(store, "crm") == [
            f"<customerInfoResult><requestID>r1</requestID>"
            f"<{verdict}/></customerInfoResult>"]
        store.close()


# ---------------------------------------------------------------------------
# criterion 2: every rule reads the state as of message arrival


SNAPSHOT_APP = """
create queue q kind basic
create queue mirror kind basic
create queue seen kind basic
create queue systemErrors kind basic

create rule produce for q
  do enqueue <copy>{/}</copy> into mirror

create rule observe for q
  if (qs:queue("mirror")/copy) then do enqueue <saw/> into seen
"""


def test_criterion_02_rules_read_a_fixed_snapshot(store_factory):
    store = store_factory(SNAPSHOT_APP)
    compiled = compile_source(SNAPSHOT_APP)

    put(store, "q", "<m>1</m>")
    drain(store, compiled)
    # produce appended a copy, but observe ran against the arrival
    # snapshot and must not have seen it
    assert bodies(store, "mirror") == ["<copy><m>1</m></copy>"]
    assert bodies(store, "seen") == []

    put(store, "q", "<m>2</m>")
    drain(store, compiled)
    # now the first copy predates the second message: observe sees it
    assert len(bodies(store, "mirror")) == 2
    assert bodies(store, "seen") == ["<saw/>"]

    put(store, "q", "<m>3</m>")
    drain(store, compiled)
    assert len(bodies(store, "seen")) == 2
    store.close()


# ---------------------------------------------------------------------------
# criterion 3: crash anywhere, recover, process everything exactly once


EXACTLY_ONCE_APP = """
create queue source kind basic
create queue sink kind basic
create queue systemErrors kind basic

create property n as xs:integer
  queue source, sink value //n

create rule fwd for source
  do enqueue <done>{//n}</done> into sink
"""


def harvest(store) -> dict:
    snap = store.snapshot()
    return {
        queue: [(x.serialize(m.body.root), m.props.get("n"), m.creating_rule)
                for m in snap.read_queue(queue)]
        for queue in ("source", "sink", "systemErrors")
    }


def test_criterion_03_exactly_once_across_crashes(tmp_path):
    compiled = compile_source(EXACTLY_ONCE_APP)
    final_states = []
    for seed in range(50):
        rng = random.Random(3000 + seed)
        directory = str(tmp_path / f"seed{seed}")
        deploy_application(directory, EXACTLY_ONCE_APP)
        store = open_store(directory)
        for i in range(100):
            put(store, "source", f"<m><n>{i}</n></m>")
        store.close()

        crashes = 0
        while True:
            failpoint = make_crasher(rng.randint(150, 4000)) \
                if crashes < 6 else None
            store = open_store(directory, failpoint=failpoint)
            try:
                Scheduler(store, compiled).drain()
            except InjectedFailure:
                crashes += 1
                continue  # the dead store is abandoned; reopen replays
            break

        assert store.unprocessed() == []
        state = harvest(store)
        store.close()
        ns = [n for _, n, _ in state["sink"]]
        assert ns == list(range(100)), f"seed {seed}: lost or duplicated work"
        assert state["systemErrors"] == []
        final_states.append(state)

    assert all(state == final_states[0] for state in final_states[1:])


# ---------------------------------------------------------------------------
# criterion 4: removal needs processed + superseded in every slicing


GC_APP = """
create queue q kind basic
create queue systemErrors kind basic

create property a as xs:string queue q value //a
create property b as xs:string queue q value //b

create slicing byA on a
create slicing byB on b
"""


def test_criterion_04_gc_requires_processed_and_stale_everywhere(store_factory):
    store = store_factory(GC_APP)
    processed = put(store, "q", "<m><a>k</a><b>k</b></m>")
    unprocessed = put(store, "q", "<m><a>k</a><b>k</b></m>")
    with store.begin_txn() as txn:
        txn.mark_processed(processed)
        txn.commit()

    assert store.garbage_collect() == 0  # current in both slicings

    with store.begin_txn() as txn:
        txn.reset_slice("byA", "k")
        txn.commit()
    assert store.garbage_collect() == 0  # still current in byB
    assert store.message(processed) is not None

    with store.begin_txn() as txn:
        txn.reset_slice("byB", "k")
        txn.commit()
    assert store.garbage_collect() == 1  # superseded everywhere
    assert store.message(processed) is None

    # the unprocessed one outlived both resets and stays collectable-proof
    assert store.message(unprocessed) is not None
    assert [m.id for m in store.snapshot().read_queue("q")] == [unprocessed]
    assert store.garbage_collect() == 0
    store.close()


# ---------------------------------------------------------------------------
# criterion 5: slice reads equal a brute-force replay, at every step


SLICE_APP = """
create queue q kind basic
create queue systemErrors kind basic

create property p1 as xs:string queue q value //p1
create property p2 as xs:string queue q value //p2
create property p3 as xs:string queue q value //p3

create slicing s1 on p1
create slicing s2 on p2
create slicing s3 on p3
"""


def test_criterion_05_slice_reads_match_brute_force(store_factory):
    store = store_factory(SLICE_APP)
    oracle = SliceOracle({"s1": "p1", "s2": "p2", "s3": "p3"})
    rng = random.Random(501)
    slicings = ("s1", "s2", "s3")
    props = ("p1", "p2", "p3")

    for batch in range(1000):
        keys = [f"b{batch}x", f"b{batch}y"]
        pairs = [(s, k) for s in slicings for k in keys]
        for _ in range(8):
            if rng.random() < 0.7:
                parts, stamped = [], {}
                for prop in props:
                    if rng.random() < 0.6:
                        key = rng.choice(keys)
                        parts.append(f"<{prop}>{key}</{prop}>")
                        stamped[prop] = key
                mid = put(store, "q", f"<m>{''.join(parts)}</m>")
                oracle.enqueue(mid, stamped)
            else:
                slicing = rng.choice(slicings)
                key = rng.choice(keys)
                with store.begin_txn() as txn:
                    txn.reset_slice(slicing, key)
                    txn.commit()
                oracle.reset(slicing, key)
            snap = store.snapshot()
            for slicing, key in pairs:
                got = [m.id for m in snap.read_slice(slicing, key)]
                assert got == oracle.members(slicing, key), (batch, slicing, key)
    store.close()


# ---------------------------------------------------------------------------
# criterion 6: path evaluation equals a naive recursive walk


def test_criterion_06_paths_match_naive_walk():
    rng = random.Random(601)
    checked = 0
    for _ in range(200):
        document = oracles.random_document(rng)
        for _ in range(50):
            path = oracles.random_path(rng)
            expected = oracles.oracle_path(document, path)
            got, updates = evaluate(path, EvalContext(context_item=document))
            assert not updates
            assert [id(n) for n in got] == [id(n) for n in expected], \
                x.serialize(document)
            checked += 1
    assert checked == 10000


# ---------------------------------------------------------------------------
# criterion 7: strict priority between queues, FIFO inside one


PRIORITY_APP = """
create queue high kind basic priority 10
create queue low kind basic priority 1
create queue systemErrors kind basic
"""


def test_criterion_07_dispatch_is_priority_then_fifo(store_factory):
    store = store_factory(PRIORITY_APP)
    compiled = compile_source(PRIORITY_APP)
    rng = random.Random(701)
    arrivals = {"high": [], "low": []}
    for i in range(100):
        queue = rng.choice(("high", "low"))
        mid = put(store, queue, f"<n>{i}</n>")
        arrivals[queue].append((queue, mid))
    assert arrivals["high"] and arrivals["low"]

    log = drain(store, compiled, workers=1)
    assert log == arrivals["high"] + arrivals["low"]
    store.close()


# ---------------------------------------------------------------------------
# criterion 8: timers fire on time, exactly once, crash or not


ECHO_APP = """
create queue timers kind echo
create queue work kind basic
create queue systemErrors kind basic
"""

ECHO_PROPS = (("EchoTarget", "work"), ("EchoDelay", 1))


def test_criterion_08_timers_fire_once_on_time(tmp_path):
    compiled = compile_source(ECHO_APP)

    def fresh(name, failpoint=None):
        directory = str(tmp_path / name)
        deploy_application(directory, ECHO_APP)
        return directory, open_store(directory, clock=FakeClock(tick=0),
                                     failpoint=failpoint)

    def service(store):
        return EchoService(store, compiled, Scheduler(store, compiled))

    # never before the deadline, fired by the first tick at or past it
    _, store = fresh("plain")
    mid = put(store, "timers", "<ping/>", explicit=ECHO_PROPS)
    created = store.message(mid).props["CreationTime"]
    timer = service(store)
    assert timer.tick(now=created) == 0
    assert timer.tick(now=created + timedelta(milliseconds=999)) == 0
    assert bodies(store, "work") == []
    assert timer.tick(now=created + timedelta(seconds=1)) == 1
    assert bodies(store, "work") == ["<ping/>"]
    assert store.is_processed(mid)
    assert timer.tick(now=created + timedelta(seconds=99)) == 0
    assert bodies(store, "work") == ["<ping/>"]
    store.close()

    # restart straddling the deadline: the timer survives and fires once
    directory, store = fresh("restart")
    mid = put(store, "timers", "<ping/>", explicit=ECHO_PROPS)
    created = store.message(mid).props["CreationTime"]
    store.close()
    store = open_store(directory, clock=FakeClock(tick=0))
    timer = service(store)
    assert timer.tick(now=created + timedelta(seconds=5)) == 1
    assert timer.tick(now=created + timedelta(seconds=6)) == 0
    assert bodies(store, "work") == ["<ping/>"]
    store.close()

    # crash in the middle of the firing commit: nothing half-done is
    # visible after recovery and the timer still fires exactly once
    directory, store = fresh("torn")
    mid = put(store, "timers", "<ping/>", explicit=ECHO_PROPS)
    created = store.message(mid).props["CreationTime"]
    store.close()
    store = open_store(directory, clock=FakeClock(tick=0),
                       failpoint=make_crasher(20))
    timer = service(store)
    with pytest.raises(Exception):
        timer.tick(now=created + timedelta(seconds=1))
    store = open_store(directory, clock=FakeClock(tick=0))
    assert bodies(store, "work") == []
    assert not store.is_processed(mid)
    timer = service(store)
    assert timer.tick(now=created + timedelta(seconds=1)) == 1
    assert timer.tick(now=created + timedelta(seconds=2)) == 0
    assert bodies(store, "work") == ["<ping/>"]
    store.close()

    # crash right after the firing commit: recovery must not fire again
    directory, store = fresh("after")
    mid = put(store, "timers", "<ping/>", explicit=ECHO_PROPS)
    created = store.message(mid).props["CreationTime"]
    timer = service(store)
    assert timer.tick(now=created + timedelta(seconds=1)) == 1
    # abandon without close: the commit is already on disk
    store = open_store(directory, clock=FakeClock(tick=0))
    timer = service(store)
    assert timer.tick(now=created + timedelta(seconds=9)) == 0
    assert bodies(store, "work") == ["<ping/>"]
    store.close()


# ---------------------------------------------------------------------------
# criterion 9: failed delivery produces a usable transport error


def error_paths_ok(message) -> None:
    ctx = EvalContext(message=message, context_item=message.body)
    kind, _ = evaluate(parse_expression("/error/disconnectedTransport",
                                        updating=False), ctx)
    assert kind, "missing transport failure marker"
    order_id, _ = evaluate(parse_expression("/error/initialMessage//orderID",
                                            updating=False), ctx)
    assert order_id, "original order lost from the error report"
    assert x.string_value(order_id[0]) == "o77"


def test_criterion_09_transport_failure_reporting(store_factory):
    base = """
    create queue orders kind basic
    create queue ship kind outgoingGateway endpoint "http://127.0.0.1:9/"{eq}
    create queue shipErr kind basic
    create queue systemErrors kind basic

    create rule sendOut for orders
      do enqueue <shipment>{{//orderID}}</shipment> into ship
    """
    for errorqueue, target in ((" errorqueue shipErr", "shipErr"),
                               ("", "systemErrors")):
        source = base.format(eq=errorqueue)
        store = store_factory(source)
        compiled = compile_source(source)
        put(store, "orders", "<order><orderID>o77</orderID></order>")
        drain(store, compiled)
        (out,) = store.snapshot().read_queue("ship")

        worker = DeliveryWorker(store, compiled, Scheduler(store, compiled),
                                ConnectionTable(), max_attempts=2, backoff=0)
        now = datetime(2024, 7, 1, tzinfo=timezone.utc)
        assert worker.tick(now=now) == 0  # refused, one attempt burned
        assert worker.tick(now=now) == 1  # second attempt, then give up
        assert store.snapshot().delivered == {out.id: False}

        (err,) = store.snapshot().read_queue(target)
        other = "systemErrors" if target == "shipErr" else "shipErr"
        assert store.snapshot().read_queue(other) == []
        error_paths_ok(err)
        store.close()

    # rule failures prefer the rule's own error queue over the queue's
    rule_source = """
    create queue orders kind basic errorqueue ordersErr
    create queue ordersErr kind basic
    create queue ruleErr kind basic
    create queue systemErrors kind basic

    create rule broken for orders errorqueue ruleErr
      do enqueue <r>{string(//two)}</r> into orders
    """
    store = store_factory(rule_source)
    compiled = compile_source(rule_source)
    put(store, "orders", "<order><two/><two/></order>")
    drain(store, compiled)
    assert len(store.snapshot().read_queue("ruleErr")) == 1
    assert store.snapshot().read_queue("ordersErr") == []
    assert store.snapshot().read_queue("systemErrors") == []
    store.close()


# ---------------------------------------------------------------------------
# criterion 10: property value precedence, all combinations


def precedence_app(fixed: bool, clause_dst: bool, inherited: bool) -> str:
    decl = "create property p as xs:string"
    if fixed:
        decl += " fixed"
    if inherited:
        decl += " inherited\n  queue src value //seed"
    if clause_dst:
        decl += "\n  queue dst value //pval"
    return f"""
create queue src kind basic
create queue dst kind basic
create queue systemErrors kind basic
{decl}
"""


def test_criterion_10_property_precedence(store_factory):
    for fixed, clause, explicit, inherited in itertools.product(
            (True, False), repeat=4):
        source = precedence_app(fixed, clause, inherited)
        store = store_factory(source)
        trigger_id = put(store, "src", "<t><seed>INH</seed></t>")
        trigger = store.message(trigger_id)
        assert (trigger.props.get("p") == "INH") == inherited

        body = "<out><pval>CLAUSE</pval></out>" if clause else "<out/>"
        pairs = (("p", "EXPL"),) if explicit else ()
        combo = (fixed, clause, explicit, inherited)

        if fixed and explicit:
            with pytest.raises(FixedPropertyOverride):
                put(store, "dst", body, explicit=pairs, trigger=trigger)
            store.close()
            continue

        mid = put(store, "dst", body, explicit=pairs, trigger=trigger)
        value = store.message(mid).props.get("p")
        if fixed:
            expected = "CLAUSE" if clause else ("INH" if inherited else None)
        elif explicit:
            expected = "EXPL"
        elif inherited:
            expected = "INH"
        elif clause:
            expected = "CLAUSE"
        else:
            expected = None
        assert value == expected, combo
        store.close()

    # reserved names: stamped by the system, never by applications
    store = store_factory(precedence_app(False, False, False))
    with pytest.raises(FixedPropertyOverride):
        put(store, "dst", "<out/>", explicit=(("CreationTime",
                                               datetime.now(timezone.utc)),))
    mid = put(store, "dst", "<out/>", explicit=(("Sender", "http://ok/"),))
    props = store.message(mid).props
    assert props["Sender"] == "http://ok/"
    assert isinstance(props["CreationTime"], datetime)
    store.close()
