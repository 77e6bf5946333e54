"""ID-token claims, compact JWS, the SOAP nonce field, and prover-side validation."""

from __future__ import annotations

import hmac
import json
from dataclasses import dataclass, field
from typing import Any, Mapping

from . import crypto
from .crypto import RandomValue, SaltedHash, SigningKeyPair, b64url_decode, b64url_encode
from .errors import CryptoError, TokenError

LIFETIME_BOUNDS = (120, 7200)
DEFAULT_SKEW = 60
NONCE_DELIMITER = "."
_STANDARD_CLAIMS = ("iss", "aud", "sub", "email", "nonce", "iat", "exp")


def check_lifetime(seconds: int) -> int:
    lo, hi = LIFETIME_BOUNDS
    if not isinstance(seconds, int) or isinstance(seconds, bool) or not lo <= seconds <= hi:
        raise TokenError("invalid-lifetime", f"token lifetime must lie in [{lo}, {hi}] s, got {seconds!r}")
    return seconds


@dataclass(frozen=True)
class IdTokenClaims:
    issuer: str
    audience: str
    subject: str
    email: str
    nonce: str
    issued_at: int
    expires_at: int
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.issued_at >= self.expires_at:
            raise TokenError("malformed-token", "issued_at must precede expires_at")

    def to_dict(self) -> dict[str, Any]:
        out = dict(self.extra)
        out.update(iss=self.issuer, aud=self.audience, sub=self.subject, email=self.email,
                   nonce=self.nonce, iat=self.issued_at, exp=self.expires_at)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "IdTokenClaims":
        try:
            strings = [data[k] for k in ("iss", "aud", "sub", "email", "nonce")]
            iat, exp = data["iat"], data["exp"]
        except (KeyError, TypeError) as exc:
            raise TokenError("malformed-token", f"missing claim {exc}") from exc
        if not all(isinstance(s, str) for s in strings):
            raise TokenError("malformed-token", "string claim has wrong type")
        if not all(isinstance(t, int) and not isinstance(t, bool) for t in (iat, exp)):
            raise TokenError("malformed-token", "iat/exp must be integers")
        extra = {k: v for k, v in data.items() if k not in _STANDARD_CLAIMS}
        return cls(*strings, iat, exp, extra)


@dataclass(frozen=True)
class IdToken:
    """A compact JWS ID token.

    Tokens returned by :func:`decode_token` have ``verified=False``; nothing
    in this object asserts that the signature is valid.
    """

    header: Mapping[str, Any]
    claims: IdTokenClaims
    signature: bytes
    compact: str
    verified: bool = False

    @property
    def signing_input(self) -> bytes:
        return self.compact.rsplit(".", 1)[0].encode("ascii")

    @property
    def key_id(self) -> str:
        return self.header["kid"]

    @property
    def algorithm(self) -> str:
        return self.header["alg"]


def _json_segment(obj: Mapping[str, Any]) -> str:
    return b64url_encode(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())


def encode_token(claims: IdTokenClaims, key: SigningKeyPair) -> IdToken:
    header = {"alg": key.algorithm, "kid": key.key_id, "typ": "JWT"}
    signing_input = f"{_json_segment(header)}.{_json_segment(claims.to_dict())}"
    signature = crypto.sign(signing_input.encode("ascii"), key)
    return IdToken(header, claims, signature, f"{signing_input}.{b64url_encode(signature)}")


def decode_token(compact: str) -> IdToken:
    """Parse without any signature check."""
    if not isinstance(compact, str):
        raise TokenError("malformed-token", "token must be a string")
    parts = compact.split(".")
    if len(parts) != 3:
        raise TokenError("malformed-token", "expected three segments")
    try:
        header = json.loads(b64url_decode(parts[0]))
        payload = json.loads(b64url_decode(parts[1]))
        signature = b64url_decode(parts[2])
    except (CryptoError, ValueError) as exc:
        raise TokenError("malformed-token", str(exc)) from exc
    if not isinstance(header, dict) or not isinstance(payload, dict):
        raise TokenError("malformed-token", "segments must be JSON objects")
    if header.get("alg") not in crypto.SIGNATURE_ALGORITHMS:
        raise TokenError("malformed-token", f"unknown algorithm {header.get('alg')!r}")
    if not isinstance(header.get("kid"), str):
        raise TokenError("malformed-token", "missing kid")
    return IdToken(header, IdTokenClaims.from_dict(payload), signature, compact)


def verify_token_signature(token: IdToken, jwks: Mapping[str, Any]) -> bool:
    """True iff a key in ``jwks`` with the token's kid and algorithm verifies it."""
    for jwk in jwks.get("keys", []):
        if jwk.get("kid") != token.key_id or jwk.get("alg") != token.algorithm:
            continue
        try:
            public, alg = crypto.jwk_to_public_key(jwk)
        except CryptoError:
            continue
        if crypto.verify(token.signing_input, token.signature, public, alg):
            return True
    return False


# -- nonce field -----------------------------------------------------------


@dataclass(frozen=True)
class NonceField:
    n: bytes
    h: bytes

    def __str__(self) -> str:
        return build_nonce_field(self.n, self.h)


def build_nonce_field(n: RandomValue | bytes, h: SaltedHash | bytes) -> str:
    n_bytes = n.bytes if isinstance(n, RandomValue) else n
    h_bytes = h.bytes if isinstance(h, SaltedHash) else h
    return b64url_encode(n_bytes) + NONCE_DELIMITER + b64url_encode(h_bytes)


def parse_nonce_field(text: str) -> NonceField:
    if not isinstance(text, str) or text.count(NONCE_DELIMITER) != 1:
        raise TokenError("malformed-nonce", "expected exactly one delimiter")
    n_text, h_text = text.split(NONCE_DELIMITER)
    if not n_text or not h_text:
        raise TokenError("malformed-nonce", "empty segment")
    try:
        return NonceField(b64url_decode(n_text), b64url_decode(h_text))
    except CryptoError as exc:
        raise TokenError("malformed-nonce", exc.detail) from exc


# -- prover-side validation -------------------------------------------------


@dataclass(frozen=True)
class ValidatedIdentity:
    issuer: str
    subject: str
    email: str


def validate_token_prover(
    token: IdToken,
    state: Any,
    client_id: str,
    now: int,
    keys: Mapping[str, Any],
    issuers: Mapping[str, str],
    skew: int = DEFAULT_SKEW,
) -> ValidatedIdentity:
    """Run the five prover checks in order; raise on the first failure.

    ``state`` is the stored request (needs ``redirect_url``, ``nonce`` and
    ``hashed_sn``); ``issuers`` maps each per-IdP redirect URL to the issuer
    expected for that IdP; ``keys`` is the IdP's JWKS document.
    """
    claims = token.claims
    expected_issuer = issuers.get(state.redirect_url)
    if expected_issuer is None or claims.issuer != expected_issuer:
        raise TokenError("issuer-mismatch", f"{claims.issuer!r} != {expected_issuer!r}")
    if claims.audience != client_id:
        raise TokenError("audience-mismatch", f"{claims.audience!r} != {client_id!r}")
    try:
        nonce = parse_nonce_field(claims.nonce)
    except TokenError as exc:
        raise TokenError("nonce-hash-mismatch", "nonce claim unparseable") from exc
    if not (hmac.compare_digest(nonce.h, state.hashed_sn.bytes)
            and hmac.compare_digest(nonce.n, state.nonce.bytes)):
        raise TokenError("nonce-hash-mismatch", "nonce claim does not carry the stored hash")
    if claims.expires_at < now - skew or claims.issued_at > now + skew:
        raise TokenError("token-expired", f"valid [{claims.issued_at}, {claims.expires_at}], now {now}")
    if not verify_token_signature(token, keys):
        raise TokenError("bad-signature", f"kid {token.key_id!r}")
    return ValidatedIdentity(claims.issuer, claims.subject, claims.email)
