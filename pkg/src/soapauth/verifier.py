"""Verifier-side validation of a forwarded SOAP attestation."""

from __future__ import annotations

import hmac
from dataclasses import dataclass, field
from typing import Any, Mapping

from .crypto import DEFAULT_HASH_PROFILE, salted_hash
from .errors import CryptoError, SoapError, VerificationError
from .idtoken import DEFAULT_SKEW, IdToken, decode_token, parse_nonce_field, verify_token_signature
from .messaging import SafetyNumber
from .prover import PROTOCOL_VERSION, ReplayCache, SoapAttestation

CHECK_ORDER = ("well-formed", "unexpired", "known-issuer", "signature", "not-self-issued", "safety-number")
_FAILURE_CODES = {
    "well-formed": "malformed-attestation",
    "unexpired": "token-expired",
    "known-issuer": "unknown-issuer",
    "signature": "bad-signature",
    "not-self-issued": "reflection-detected",
    "safety-number": "safety-number-mismatch",
}


@dataclass(frozen=True)
class TrustedIdp:
    idp_id: str
    issuer: str
    jwks: Mapping[str, Any]


class IdpRegistry:
    """Issuers the messaging app trusts, with their pinned key sets."""

    def __init__(self, idps: list[TrustedIdp] = ()):
        self.by_issuer: dict[str, TrustedIdp] = {i.issuer: i for i in idps}

    def add(self, idp: TrustedIdp) -> None:
        self.by_issuer[idp.issuer] = idp

    def get(self, issuer: str) -> TrustedIdp | None:
        return self.by_issuer.get(issuer)

    def to_dict(self) -> dict[str, Any]:
        return {"issuers": {iss: {"idp_id": i.idp_id, "jwks": i.jwks}
                            for iss, i in sorted(self.by_issuer.items())}}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "IdpRegistry":
        return cls([TrustedIdp(entry["idp_id"], iss, entry["jwks"])
                    for iss, entry in data["issuers"].items()])


@dataclass(frozen=True)
class AuthenticatedIdentity:
    issuer: str
    idp_id: str
    subject: str
    email: str
    safety_number: SafetyNumber
    verified_at: int
    nonce_field: str = field(default="", compare=False)


@dataclass
class VerificationReport:
    checks: list[tuple[str, bool]] = field(default_factory=list)
    identity: AuthenticatedIdentity | None = None
    error: str | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.identity is not None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "ok": self.ok,
            "error": self.error,
            "checks": [{"check": name, "passed": passed} for name, passed in self.checks],
        }
        if self.identity is not None:
            ident = self.identity
            out["identity"] = {"issuer": ident.issuer, "idp": ident.idp_id, "subject": ident.subject,
                               "email": ident.email, "safety_number": ident.safety_number.hex,
                               "verified_at": ident.verified_at}
        return out


def check_attestation(
    att: SoapAttestation | str,
    channel_sn: SafetyNumber,
    own_cache: ReplayCache,
    idp_registry: IdpRegistry,
    now: int,
    skew: int = DEFAULT_SKEW,
    hash_profile: str = DEFAULT_HASH_PROFILE,
) -> VerificationReport:
    """Evaluate every check in order and stop at the first failure."""
    report = VerificationReport()

    def fail(check: str, detail: str = "") -> VerificationReport:
        report.checks.append((check, False))
        report.error, report.detail = _FAILURE_CODES[check], detail
        return report

    try:
        if isinstance(att, str):
            att = SoapAttestation.from_json(att)
        if att.protocol_version != PROTOCOL_VERSION:
            return fail("well-formed", f"unsupported protocol version {att.protocol_version!r}")
        token: IdToken = decode_token(att.token)
        nonce = parse_nonce_field(token.claims.nonce)
    except (SoapError, CryptoError) as exc:
        return fail("well-formed", str(exc))
    report.checks.append(("well-formed", True))

    claims = token.claims
    if claims.expires_at < now - skew or claims.issued_at > now + skew:
        return fail("unexpired", f"valid [{claims.issued_at}, {claims.expires_at}], now {now}")
    report.checks.append(("unexpired", True))

    trusted = idp_registry.get(claims.issuer)
    if trusted is None or trusted.idp_id != att.idp_id:
        return fail("known-issuer", claims.issuer)
    report.checks.append(("known-issuer", True))

    if not verify_token_signature(token, trusted.jwks):
        return fail("signature", f"kid {token.key_id!r}")
    report.checks.append(("signature", True))

    if nonce.n in own_cache:
        return fail("not-self-issued", "nonce was issued by this instance")
    report.checks.append(("not-self-issued", True))

    try:
        recomputed = salted_hash(channel_sn, att.salt, hash_profile)
    except CryptoError as exc:
        return fail("safety-number", str(exc))
    if not hmac.compare_digest(recomputed.bytes, nonce.h):
        return fail("safety-number", "token is bound to a different safety number")
    report.checks.append(("safety-number", True))

    report.identity = AuthenticatedIdentity(claims.issuer, trusted.idp_id, claims.subject, claims.email,
                                            channel_sn, now, claims.nonce)
    return report


def verify_attestation(
    att: SoapAttestation | str,
    channel_sn: SafetyNumber,
    own_cache: ReplayCache,
    idp_registry: IdpRegistry,
    now: int,
    skew: int = DEFAULT_SKEW,
    hash_profile: str = DEFAULT_HASH_PROFILE,
) -> AuthenticatedIdentity:
    report = check_attestation(att, channel_sn, own_cache, idp_registry, now, skew, hash_profile)
    if report.identity is None:
        raise VerificationError(report.error or "malformed-attestation", report.detail)
    return report.identity
