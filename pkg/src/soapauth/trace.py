"""Recorded protocol facts.

Events mirror the facts of the formal model (``SendMessaging``,
``ReceiveIdP``, ``Correspond``, ``Sender``, compromise markers ...).  A
``Sender`` event shares its tick with the single ``Send*`` event it
attributes; every other event gets a fresh, strictly larger tick.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator

SEND_KINDS = ("SendMessaging", "SendIdP")

EVENT_KINDS = frozenset({
    "SendMessaging", "ReceiveMessaging", "SendIdP", "ReceiveIdP", "Correspond", "Sender",
    "CompromisedAccount", "CompromisedIdP", "CompromisedDomain", "CompromisedMessaging",
    "IsMessagingApp", "IsRedirectURL", "IdpObservation", "CodeReplay",
})


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    kind: str
    args: dict[str, Any] = field(default_factory=dict)
    time: int = 0

    def __getitem__(self, key: str) -> Any:
        return self.args[key]

    def to_dict(self) -> dict[str, Any]:
        return {"tick": self.tick, "time": self.time, "kind": self.kind, "args": self.args}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TraceEvent":
        return cls(int(data["tick"]), data["kind"], dict(data.get("args", {})), int(data.get("time", 0)))

    def __hash__(self) -> int:
        return hash((self.tick, self.kind, json.dumps(self.args, sort_keys=True)))


class Trace:
    """Append-only event log with a logical tick counter."""

    def __init__(self, events: Iterable[TraceEvent] = ()):
        self.events: list[TraceEvent] = list(events)
        self._tick = max((e.tick for e in self.events), default=0)
        self.clock = lambda: 0

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def emit(self, kind: str, **args: Any) -> TraceEvent:
        if kind not in EVENT_KINDS or kind == "Sender":
            raise ValueError(f"cannot emit {kind!r} directly")
        self._tick += 1
        event = TraceEvent(self._tick, kind, args, self.clock())
        self.events.append(event)
        return event

    def emit_send(self, kind: str, agent: str, **args: Any) -> TraceEvent:
        """Emit a ``Send*`` event and its co-occurring ``Sender`` fact."""
        if kind not in SEND_KINDS:
            raise ValueError(f"{kind!r} is not a send event")
        event = self.emit(kind, **args)
        self.events.append(TraceEvent(event.tick, "Sender", {"agent": agent}, event.time))
        return event

    def of_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.events)

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        return cls(TraceEvent.from_dict(json.loads(line)) for line in text.splitlines() if line.strip())


def check_trace_shape(events: Iterable[TraceEvent]) -> None:
    """Assert the tick discipline; raises ``AssertionError``."""
    last = 0
    pending_send: TraceEvent | None = None
    for event in events:
        if event.kind == "Sender":
            assert pending_send is not None and pending_send.tick == event.tick, \
                f"Sender at tick {event.tick} without a Send event"
            pending_send = None
            continue
        assert event.tick > last, f"tick {event.tick} not after {last}"
        last = event.tick
        pending_send = event if event.kind in SEND_KINDS else None
