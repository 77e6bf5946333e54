"""Simulated messaging ecosystem: key server, SMS registration, safety numbers
and ideal (authentic, confidential) channels."""

from __future__ import annotations

import hmac
import struct
from dataclasses import dataclass, field
from typing import Any

from . import crypto
from .crypto import RandomSource, SigningKeyPair
from .errors import MessagingError
from .trace import Trace


@dataclass(frozen=True)
class SafetyNumber:
    digest: bytes
    parties: frozenset[bytes] = frozenset()

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def from_hex(cls, text: str) -> "SafetyNumber":
        try:
            digest = bytes.fromhex(text)
        except ValueError as exc:
            raise MessagingError("invalid-safety-number", str(exc)) from exc
        if len(digest) != 32:
            raise MessagingError("invalid-safety-number", "expected 32 bytes")
        return cls(digest)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SafetyNumber) and self.digest == other.digest

    def __hash__(self) -> int:
        return hash(self.digest)


def compute_safety_number(pk_a: bytes, pk_b: bytes) -> SafetyNumber:
    """Order-invariant fingerprint of two canonical public-key encodings."""
    if pk_a == pk_b:
        raise MessagingError("invalid-pair", "identical keys")
    material = b"".join(struct.pack(">H", len(k)) + k for k in sorted((pk_a, pk_b)))
    return SafetyNumber(crypto.sha256(material), frozenset((pk_a, pk_b)))


def key_label(public: bytes) -> str:
    return public.hex()


@dataclass
class MessagingIdentity:
    phone: str
    keypair: SigningKeyPair
    registered: bool = False

    @property
    def public(self) -> bytes:
        return self.keypair.public_bytes()

    @classmethod
    def generate(cls, phone: str, source: RandomSource) -> "MessagingIdentity":
        return cls(phone, crypto.generate_signing_key("EdDSA", key_id=phone, source=source))


class SmsChannel:
    """Insecure SMS: every message is readable by anyone holding the log."""

    def __init__(self) -> None:
        self.log: list[tuple[str, str]] = []

    def send(self, phone: str, text: str) -> None:
        self.log.append((phone, text))

    def read(self, phone: str) -> str | None:
        for to, text in reversed(self.log):
            if to == phone:
                return text
        return None


class KeyServer:
    def __init__(self, source: RandomSource):
        self.source = source
        self.directory: dict[str, bytes] = {}
        self.compromised = False
        self._pending: dict[str, tuple[bytes, str]] = {}

    def request_registration(self, phone: str, public: bytes, sms: SmsChannel) -> None:
        otp = f"{self.source.getrandbits(20) % 1_000_000:06d}"
        self._pending[phone] = (public, otp)
        sms.send(phone, otp)

    def confirm_registration(self, phone: str, otp: str) -> bytes:
        pending = self._pending.pop(phone, None)
        if pending is None or not hmac.compare_digest(pending[1], otp):
            raise MessagingError("registration-failed", phone)
        self.directory[phone] = pending[0]
        return pending[0]

    def substitute_key(self, phone: str, public: bytes) -> None:
        if not self.compromised:
            raise MessagingError("not-compromised", "key server is honest")
        self.directory[phone] = public

    def lookup(self, phone: str) -> bytes:
        try:
            return self.directory[phone]
        except KeyError:
            raise MessagingError("unknown-phone", phone) from None


def register(identity: MessagingIdentity, key_server: KeyServer, sms: SmsChannel,
             otp: str | None = None) -> MessagingIdentity:
    """Register ``identity``; the owner echoes the OTP it reads from SMS unless ``otp`` is given."""
    key_server.request_registration(identity.phone, identity.public, sms)
    echoed = otp if otp is not None else sms.read(identity.phone)
    key_server.confirm_registration(identity.phone, echoed or "")
    identity.registered = True
    return identity


@dataclass
class Channel:
    """Ideal channel between two keys; only holders of an endpoint key may use it."""

    endpoints: frozenset[bytes]
    trace: Trace | None = None
    transcript: list[tuple[bytes, bytes, str]] = field(default_factory=list)
    _cursor: dict[bytes, int] = field(default_factory=dict)

    @property
    def safety_number(self) -> SafetyNumber:
        a, b = sorted(self.endpoints)
        return compute_safety_number(a, b)

    def _peer(self, key: bytes) -> bytes:
        (peer,) = self.endpoints - {key}
        return peer

    def send(self, sender: SigningKeyPair, payload: str, agent: str) -> None:
        key = sender.public_bytes()
        if key not in self.endpoints:
            raise MessagingError("channel-violation", "sender holds no endpoint key")
        peer = self._peer(key)
        self.transcript.append((key, peer, payload))
        if self.trace is not None:
            self.trace.emit_send("SendMessaging", agent, send_key=key_label(key),
                                 rcv_key=key_label(peer), m=payload)

    def receive(self, receiver: SigningKeyPair) -> str | None:
        """Next unread message addressed to ``receiver``, or ``None``."""
        key = receiver.public_bytes()
        if key not in self.endpoints:
            raise MessagingError("channel-violation", "receiver holds no endpoint key")
        start = self._cursor.get(key, 0)
        for i in range(start, len(self.transcript)):
            sender, rcv, payload = self.transcript[i]
            if rcv == key:
                self._cursor[key] = i + 1
                if self.trace is not None:
                    self.trace.emit("ReceiveMessaging", send_key=key_label(sender),
                                    rcv_key=key_label(rcv), m=payload)
                return payload
        self._cursor[key] = len(self.transcript)
        return None


def open_channel(pk_a: bytes, pk_b: bytes, trace: Trace | None = None) -> Channel:
    if pk_a == pk_b:
        raise MessagingError("invalid-pair", "identical keys")
    return Channel(frozenset((pk_a, pk_b)), trace)


def send(channel: Channel, sender: SigningKeyPair, payload: str, agent: str) -> None:
    channel.send(sender, payload, agent)


def receive(channel: Channel, receiver: SigningKeyPair) -> Any:
    return channel.receive(receiver)
