from datetime import datetime, timezone
from decimal import Decimal

import pytest

from declmq.applang import (
    ValueType,
    coerce_value,
    parse_application,
    parse_typed_value,
    validate_application,
)
from declmq.errors import PropertyValueError


def codes(source: str) -> set[str]:
    return {d.code for d in validate_application(parse_application(source)).diagnostics}


def test_valid_application_is_clean():
    report = validate_application(
        parse_application(
            """
            create queue q kind basic errorqueue e
            create queue e kind basic
            create property p as xs:string queue q value //a
            create slicing s on p
            create rule r1 for q do enqueue <a/> into q
            create rule r2 for s do reset
            """
        )
    )
    assert report.ok


def test_unresolved_names_flagged():
    assert "unresolved-name" in codes("create queue q kind basic errorqueue ghost")
    assert "unresolved-name" in codes(
        "create queue q kind basic\ncreate property p as xs:string queue ghost value 1"
    )
    assert "unresolved-name" in codes("create queue q kind basic\ncreate slicing s on ghost")
    assert "unresolved-name" in codes(
        "create queue q kind basic\ncreate rule r for ghost do enqueue <a/> into q"
    )
    assert "unresolved-name" in codes(
        "create queue q kind basic\n"
        "create rule r for q errorqueue ghost do enqueue <a/> into q"
    )


def test_endpoint_only_on_gateways():
    assert "endpoint-misplaced" in codes('create queue q kind basic endpoint "http://h/"')
    assert "endpoint-misplaced" not in codes(
        'create queue q kind outgoingGateway endpoint "http://h/"'
    )


def test_clause_queues_must_not_overlap():
    assert "duplicate-clause-queue" in codes(
        """
        create queue a kind basic
        create property p as xs:string
          queue a value 1
          queue a value 2
        """
    )


def test_slice_functions_restricted_to_slicing_rules():
    base = "create queue q kind basic\n"
    assert "slice-function-outside-slicing" in codes(
        base + "create rule r for q if (qs:slice()) then do enqueue <a/> into q"
    )
    assert "slice-function-outside-slicing" in codes(
        base + "create rule r for q if (//a) then do reset"
    )


def test_rule_target_kind_resolution():
    app = parse_application(
        """
        create queue q kind basic
        create property p as xs:string queue q value //a
        create slicing s on p
        create rule onq for q do enqueue <a/> into q
        create rule ons for s do reset
        """
    )
    kinds = {r.name: r.target_kind for r in app.rules}
    assert kinds == {"onq": "queue", "ons": "slicing"}


# ---------------------------------------------------------------------------
# typed values


def test_coerce_string_and_integer():
    assert coerce_value(ValueType.STRING, 42) == "42"
    assert coerce_value(ValueType.INTEGER, "17") == 17
    assert coerce_value(ValueType.INTEGER, Decimal("5")) == 5


def test_coerce_decimal_and_datetime():
    assert coerce_value(ValueType.DECIMAL, "2.5") == Decimal("2.5")
    got = coerce_value(ValueType.DATETIME, "2024-06-01T10:00:00+00:00")
    assert got == datetime(2024, 6, 1, 10, tzinfo=timezone.utc)


def test_coerce_failures():
    with pytest.raises(PropertyValueError):
        coerce_value(ValueType.INTEGER, "not a number")
    with pytest.raises(PropertyValueError):
        coerce_value(ValueType.DATETIME, "today")
    with pytest.raises(PropertyValueError):
        coerce_value(ValueType.INTEGER, "2.5")


def test_parse_typed_value_is_the_cli_entry():
    assert parse_typed_value(ValueType.INTEGER, "3") == 3
    assert parse_typed_value(ValueType.STRING, "s") == "s"
