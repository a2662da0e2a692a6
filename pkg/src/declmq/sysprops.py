"""Reserved message properties.

These names are never declared in application text; the engine manages them.
``settable`` marks the ones an application may assign through ``with``
clauses; the others are system-set and reject explicit assignment.
``propagated`` marks the ones copied from the triggering message to derived
messages (connection correlation and reply addressing survive rule chains).
"""

from __future__ import annotations

from dataclasses import dataclass

from .applang import ValueType


@dataclass(frozen=True)
class ReservedProperty:
    name: str
    value_type: ValueType
    settable: bool
    propagated: bool


RESERVED: dict[str, ReservedProperty] = {
    p.name: p
    for p in (
        ReservedProperty("Sender", ValueType.STRING, True, True),
        ReservedProperty("Recipient", ValueType.STRING, True, False),
        ReservedProperty("ConnectionId", ValueType.STRING, False, True),
        ReservedProperty("ArrivalTime", ValueType.DATETIME, False, False),
        ReservedProperty("CreationTime", ValueType.DATETIME, False, False),
        ReservedProperty("CreatingRule", ValueType.STRING, False, False),
        ReservedProperty("EchoTarget", ValueType.STRING, True, False),
        ReservedProperty("EchoDelay", ValueType.INTEGER, True, False),
    )
}
