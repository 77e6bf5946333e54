"""Trace-property checkers: sender correspondence and IdP-observation privacy."""

from __future__ import annotations

import base64
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from ..crypto import b64url_decode, b64url_encode
from ..errors import CryptoError
from ..idp import AUTHORIZATION_PARAMS, TOKEN_PARAMS
from ..trace import Trace, TraceEvent

DISJUNCTS = ("account", "idp-keys", "idp-domain", "redirect-domain", "messaging-key")
ALLOWED_OBSERVATION_FIELDS = frozenset(AUTHORIZATION_PARAMS) | frozenset(TOKEN_PARAMS)


@dataclass
class Verdict:
    property: str
    holds: bool
    witness: tuple[TraceEvent, ...] | None = None
    excused: list[dict[str, Any]] = field(default_factory=list)
    details: dict[str, Any] = field(default_factory=dict)

    @property
    def attributed_to(self) -> list[str]:
        return sorted({name for e in self.excused for name in e["by"]})

    def to_dict(self) -> dict[str, Any]:
        return {
            "property": self.property,
            "holds": self.holds,
            "witness": None if self.witness is None else [e.to_dict() for e in self.witness],
            "attributed_to": self.attributed_to,
            "excused": self.excused,
            "details": self.details,
        }


def _events(trace: Trace | Iterable[TraceEvent]) -> list[TraceEvent]:
    return list(trace.events if isinstance(trace, Trace) else trace)


def compromise_disjuncts(events: Sequence[TraceEvent], idp: str, acc: str, send_key: str) -> list[str]:
    """Names of the threat-model disjuncts witnessed for one association."""
    found = []
    kinds: dict[str, list[TraceEvent]] = defaultdict(list)
    for e in events:
        kinds[e.kind].append(e)
    if any(e["idp"] == idp and e["acc"] == acc for e in kinds["CompromisedAccount"]):
        found.append("account")
    if any(e["idp"] == idp for e in kinds["CompromisedIdP"]):
        found.append("idp-keys")
    domains = {e["name"] for e in kinds["CompromisedDomain"]}
    if idp in domains:
        found.append("idp-domain")
    if kinds["IsMessagingApp"]:
        apps = {e["app"] for e in kinds["IsMessagingApp"]}
        if any(e["idp"] == idp and e["app"] in apps and e["url"] in domains for e in kinds["IsRedirectURL"]):
            found.append("redirect-domain")
    if any(e["key"] == send_key for e in kinds["CompromisedMessaging"]):
        found.append("messaging-key")
    return found


def _core_failures(events: Sequence[TraceEvent]) -> list[tuple[TraceEvent, TraceEvent, TraceEvent]]:
    """(Correspond, ReceiveMessaging, ReceiveIdP) triples with no common sender."""
    senders: dict[int, set[str]] = defaultdict(set)
    sent_msg: dict[tuple, list[int]] = defaultdict(list)
    sent_idp: dict[tuple, list[int]] = defaultdict(list)
    received_msg: dict[str, list[TraceEvent]] = defaultdict(list)
    received_idp: dict[tuple, list[TraceEvent]] = defaultdict(list)
    corresponds = []
    for e in events:
        if e.kind == "Sender":
            senders[e.tick].add(e["agent"])
        elif e.kind == "SendMessaging":
            sent_msg[(e["send_key"], e["rcv_key"], e["m"])].append(e.tick)
        elif e.kind == "SendIdP":
            sent_idp[(e["idp"], e["acc"], e["m"])].append(e.tick)
        elif e.kind == "ReceiveMessaging":
            received_msg[e["send_key"]].append(e)
        elif e.kind == "ReceiveIdP":
            received_idp[(e["idp"], e["acc"])].append(e)
        elif e.kind == "Correspond":
            corresponds.append(e)

    def who(ticks: list[int], before: int) -> set[str]:
        return set().union(*(senders[t] for t in ticks if t < before)) if ticks else set()

    failures = []
    for c in corresponds:
        for r1 in received_msg[c["send_key"]]:
            s1 = who(sent_msg[(r1["send_key"], r1["rcv_key"], r1["m"])], r1.tick)
            for r2 in received_idp[(c["idp"], c["acc"])]:
                s2 = who(sent_idp[(r2["idp"], r2["acc"], r2["m"])], r2.tick)
                if not s1 & s2:
                    failures.append((c, r1, r2))
    return failures


def _evaluate(events: Sequence[TraceEvent], threat_model: bool) -> tuple[list, list]:
    violations, excused = [], []
    for c, r1, r2 in _core_failures(events):
        by = compromise_disjuncts(events, c["idp"], c["acc"], c["send_key"]) if threat_model else []
        (excused if by else violations).append((c, r1, r2, by))
    return violations, excused


def minimal_witness(events: Sequence[TraceEvent], violates: Callable[[list[TraceEvent]], bool]) -> tuple[TraceEvent, ...]:
    """Greedy single-event removal while the violation persists."""
    current = list(events)
    i = 0
    while i < len(current):
        candidate = current[:i] + current[i + 1:]
        if violates(candidate):
            current = candidate
        else:
            i += 1
    return tuple(current)


def check_sender_correspondence(trace: Trace | Iterable[TraceEvent], *, threat_model: bool = True) -> Verdict:
    """Evaluate the social-authentication formula over a finished trace.

    With ``threat_model=False`` the compromise disjuncts are ignored, which
    exposes attacks that only succeed outside the threat model.
    """
    events = _events(trace)
    name = "sender-correspondence" if threat_model else "sender-correspondence[core]"
    violations, excused = _evaluate(events, threat_model)
    excused_info = [{"correspond": c.to_dict(), "by": by} for c, _, _, by in excused]
    if not violations:
        return Verdict(name, True, excused=excused_info)
    witness = minimal_witness(events, lambda evs: bool(_evaluate(evs, threat_model)[0]))
    c, r1, r2, _ = violations[0]
    return Verdict(name, False, witness, excused_info,
                   {"violations": len(violations), "first": [c.to_dict(), r1.to_dict(), r2.to_dict()]})


# -- privacy ---------------------------------------------------------------


def _encodings(secret: bytes) -> set[str]:
    forms = {b64url_encode(secret), secret.hex(), secret.hex().upper(),
             base64.b64encode(secret).decode(), base64.b64encode(secret).decode().rstrip("=")}
    raw = secret.decode("latin-1")
    if raw:
        forms.add(raw)
    return {f for f in forms if f}


def salts_from_trace(events: Iterable[TraceEvent]) -> list[bytes]:
    """Salts carried in attestations sent over the messaging channel."""
    salts = []
    for e in events:
        if e.kind != "SendMessaging":
            continue
        try:
            payload = json.loads(e["m"])
            salts.append(b64url_decode(payload["salt"]))
        except (ValueError, KeyError, TypeError, CryptoError):
            continue
    return salts


def check_privacy_leakage(trace: Trace | Iterable[TraceEvent], idp: str,
                          secrets: Iterable[bytes] = ()) -> Verdict:
    """Only the allowed protocol fields reach ``idp`` and no secret leaks into them.

    ``secrets`` adds values (e.g. raw safety numbers) to the salts that are
    recovered from the trace automatically.
    """
    events = _events(trace)
    observations = [e for e in events if e.kind == "IdpObservation" and e["idp"] == idp]
    needles: dict[str, str] = {}
    for secret in list(secrets) + salts_from_trace(events):
        for form in _encodings(secret):
            needles[form] = b64url_encode(secret)
    observed_fields: set[str] = set()
    offending = []
    leaks = []
    for e in observations:
        fields = e["fields"]
        observed_fields |= set(fields)
        bad = set(fields) - ALLOWED_OBSERVATION_FIELDS
        hits = [(k, needles[n]) for k, v in fields.items() for n in needles if n in str(v)]
        if bad or hits:
            offending.append(e)
            leaks.extend({"field": k, "secret": s} for k, s in hits)
            leaks.extend({"field": k, "secret": None} for k in sorted(bad))
    details = {"observed_fields": sorted(observed_fields), "observations": len(observations), "leaks": leaks}
    if offending:
        return Verdict(f"privacy[{idp}]", False, tuple(offending), details=details)
    return Verdict(f"privacy[{idp}]", True, details=details)
