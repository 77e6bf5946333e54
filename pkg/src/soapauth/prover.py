"""Prover side of SOAP: request construction, redirect handling, token
validation, replay-cache bookkeeping and attestation emission."""

from __future__ import annotations

import hmac
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping
from urllib.parse import parse_qsl, urlencode, urlsplit, urlunsplit

from .crypto import (
    DEFAULT_HASH_PROFILE,
    RandomSource,
    RandomValue,
    SaltedHash,
    b64url_decode,
    b64url_encode,
    pkce_challenge,
    salted_hash,
)
from .errors import CryptoError, ProverError, SoapError
from .idtoken import DEFAULT_SKEW, IdToken, build_nonce_field, decode_token, validate_token_prover

PROTOCOL_VERSION = "soap/1"
SCOPE = "openid email"


@dataclass(frozen=True)
class IdpRegistration:
    """What the messaging app knows about one IdP it is registered with."""

    idp_id: str
    issuer: str
    client_id: str
    redirect_url: str
    authorization_endpoint: str
    token_endpoint: str

    def to_dict(self) -> dict[str, str]:
        return dict(self.__dict__)


@dataclass
class ProverConfig:
    app_base: str
    registrations: dict[str, IdpRegistration] = field(default_factory=dict)
    hash_profile: str = DEFAULT_HASH_PROFILE
    skew: int = DEFAULT_SKEW

    def redirect_url_for(self, idp_id: str) -> str:
        return f"{self.app_base.rstrip('/')}/cb/{idp_id}"

    def register(self, idp_id: str, issuer: str, client_id: str,
                 authorization_endpoint: str, token_endpoint: str) -> IdpRegistration:
        reg = IdpRegistration(idp_id, issuer, client_id, self.redirect_url_for(idp_id),
                              authorization_endpoint, token_endpoint)
        self.registrations[idp_id] = reg
        return reg

    @property
    def issuers_by_redirect(self) -> dict[str, str]:
        return {r.redirect_url: r.issuer for r in self.registrations.values()}

    def registration(self, idp_id: str) -> IdpRegistration:
        try:
            return self.registrations[idp_id]
        except KeyError:
            raise ProverError("unknown-idp", idp_id) from None


@dataclass(frozen=True)
class SoapRequestState:
    """The most recently issued request for one IdP."""

    nonce: RandomValue
    salt: RandomValue
    code_verifier: RandomValue
    hashed_sn: SaltedHash
    idp_id: str
    redirect_url: str
    created_at: int

    def __post_init__(self) -> None:
        for value in (self.nonce, self.salt, self.code_verifier):
            if value.entropy_bits < 256:
                raise ProverError("invalid-state", "random values need 256 bits of entropy")

    @property
    def state_param(self) -> str:
        return self.nonce.b64

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.nonce.b64, "s": self.salt.b64, "cv": self.code_verifier.b64,
                "h": self.hashed_sn.b64, "profile": self.hashed_sn.profile, "idp": self.idp_id,
                "redirect_url": self.redirect_url, "created_at": self.created_at}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SoapRequestState":
        return cls(RandomValue.from_b64(d["n"]), RandomValue.from_b64(d["s"]),
                   RandomValue.from_b64(d["cv"]), SaltedHash(b64url_decode(d["h"]), d["profile"]),
                   d["idp"], d["redirect_url"], int(d["created_at"]))


@dataclass(frozen=True)
class TokenExchange:
    """Intent to redeem ``code`` at the IdP's token endpoint."""

    idp_id: str
    code: str
    code_verifier: str
    client_id: str
    redirect_url: str
    token_endpoint: str

    def form(self) -> dict[str, str]:
        return {"grant_type": "authorization_code", "code": self.code,
                "code_verifier": self.code_verifier, "client_id": self.client_id,
                "redirect_uri": self.redirect_url}


@dataclass(frozen=True)
class SoapAttestation:
    token: str
    salt: RandomValue
    idp_id: str
    protocol_version: str = PROTOCOL_VERSION

    def to_dict(self) -> dict[str, str]:
        return {"v": self.protocol_version, "idp": self.idp_id, "token": self.token, "salt": self.salt.b64}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def to_fragment(self) -> str:
        return urlencode(self.to_dict())

    def to_link(self, base: str) -> str:
        return f"{base.rstrip('/')}/soap#{self.to_fragment()}"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SoapAttestation":
        try:
            fields = (d["token"], d["salt"], d["idp"], d["v"])
        except (KeyError, TypeError) as exc:
            raise ProverError("malformed-attestation", f"missing {exc}") from exc
        if not all(isinstance(f, str) for f in fields):
            raise ProverError("malformed-attestation", "fields must be strings")
        try:
            salt = RandomValue.from_b64(fields[1])
        except CryptoError as exc:
            raise ProverError("malformed-attestation", "salt is not base64url") from exc
        return cls(fields[0], salt, fields[2], fields[3])

    @classmethod
    def from_json(cls, text: str) -> "SoapAttestation":
        try:
            return cls.from_dict(json.loads(text))
        except ValueError as exc:
            raise ProverError("malformed-attestation", str(exc)) from exc

    @classmethod
    def from_fragment(cls, text: str) -> "SoapAttestation":
        text = text.split("#", 1)[-1]
        return cls.from_dict(dict(parse_qsl(text, keep_blank_values=True)))


class ReplayCache:
    """Nonces this instance issued itself, kept until their token expires."""

    def __init__(self, entries: Mapping[bytes, int] | None = None):
        self.entries: dict[bytes, int] = dict(entries or {})

    def add(self, nonce: bytes, expires_at: int) -> None:
        self.entries[nonce] = max(expires_at, self.entries.get(nonce, expires_at))

    def __contains__(self, nonce: object) -> bool:
        return nonce in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def prune(self, now: int) -> "ReplayCache":
        self.entries = {n: exp for n, exp in self.entries.items() if exp >= now}
        return self

    def to_dict(self) -> dict[str, int]:
        return {b64url_encode(n): exp for n, exp in sorted(self.entries.items())}

    @classmethod
    def from_dict(cls, d: Mapping[str, int]) -> "ReplayCache":
        return cls({b64url_decode(k): int(v) for k, v in d.items()})


def prune_cache(cache: ReplayCache, now: int) -> ReplayCache:
    return cache.prune(now)


# -- protocol steps ----------------------------------------------------------


def authorization_params(state: SoapRequestState, registration: IdpRegistration) -> dict[str, str]:
    return {
        "client_id": registration.client_id,
        "redirect_uri": state.redirect_url,
        "scope": SCOPE,
        "response_type": "code",
        "state": state.state_param,
        "nonce": build_nonce_field(state.nonce, state.hashed_sn),
        "code_challenge": pkce_challenge(state.code_verifier.b64),
        "code_challenge_method": "S256",
    }


def start_soap(safety_number: Any, idp_id: str, config: ProverConfig, *,
               source: RandomSource, now: int) -> tuple[str, SoapRequestState]:
    """Build the authorization request URL and the state to store for it."""
    registration = config.registration(idp_id)
    nonce = source.random_value(256)
    salt = source.random_value(256)
    code_verifier = source.random_value(256)
    state = SoapRequestState(nonce, salt, code_verifier,
                             salted_hash(safety_number, salt, config.hash_profile),
                             idp_id, registration.redirect_url, now)
    url = f"{registration.authorization_endpoint}?{urlencode(authorization_params(state, registration))}"
    return url, state


def split_redirect(url: str) -> tuple[str, dict[str, str]]:
    """Split a redirect into (URL without query, query parameters)."""
    parts = urlsplit(url)
    return urlunsplit(parts._replace(query="", fragment="")), dict(parse_qsl(parts.query))


def handle_redirect(params: Mapping[str, str], arrival_redirect_url: str,
                    stored: SoapRequestState | None, config: ProverConfig) -> TokenExchange:
    if stored is None:
        raise ProverError("no-pending-request")
    if arrival_redirect_url != stored.redirect_url:
        raise ProverError("redirect-origin-mismatch", f"{arrival_redirect_url} != {stored.redirect_url}")
    try:
        state = b64url_decode(params.get("state", ""))
    except CryptoError:
        state = b""
    if not hmac.compare_digest(state, stored.nonce.bytes):
        raise ProverError("state-mismatch")
    if "error" in params:
        raise ProverError("access-denied", params["error"])
    code = params.get("code")
    if not code:
        raise ProverError("malformed-redirect", "no code")
    reg = config.registration(stored.idp_id)
    return TokenExchange(stored.idp_id, code, stored.code_verifier.b64, reg.client_id,
                         stored.redirect_url, reg.token_endpoint)


def complete(token_response: IdToken | str, stored: SoapRequestState, cache: ReplayCache, now: int,
             *, config: ProverConfig, keys: Mapping[str, Any]) -> SoapAttestation:
    """Validate the token and, on success, record the nonce and build the attestation."""
    token = decode_token(token_response) if isinstance(token_response, str) else token_response
    reg = config.registration(stored.idp_id)
    validate_token_prover(token, stored, reg.client_id, now, keys,
                          config.issuers_by_redirect, config.skew)
    cache.add(stored.nonce.bytes, token.claims.expires_at + config.skew)
    return SoapAttestation(token.compact, stored.salt, stored.idp_id)


# -- application instance ------------------------------------------------------


class Prover:
    """One messaging-app instance acting as prover.

    Holds at most one pending request per IdP and the replay cache shared
    with the same instance's verifier role.
    """

    def __init__(self, config: ProverConfig, *, source: RandomSource | None = None,
                 cache: ReplayCache | None = None):
        self.config = config
        self.source = source or RandomSource()
        self.cache = cache if cache is not None else ReplayCache()
        self.pending: dict[str, SoapRequestState] = {}

    def start(self, safety_number: Any, idp_id: str, now: int) -> str:
        url, state = start_soap(safety_number, idp_id, self.config, source=self.source, now=now)
        self.pending[idp_id] = state
        return url

    def _stored_for(self, arrival: str, params: Mapping[str, str]) -> SoapRequestState | None:
        try:
            presented = b64url_decode(params.get("state", ""))
        except CryptoError:
            presented = b""
        for state in self.pending.values():
            if hmac.compare_digest(state.nonce.bytes, presented):
                return state
        for state in self.pending.values():
            if state.redirect_url == arrival:
                return state
        if self.pending:
            return max(self.pending.values(), key=lambda s: s.created_at)
        return None

    def on_redirect(self, url: str) -> TokenExchange:
        """Accept a browser redirect; a rejected redirect leaves pending state intact."""
        arrival, params = split_redirect(url)
        return handle_redirect(params, arrival, self._stored_for(arrival, params), self.config)

    def finish(self, idp_id: str, token: IdToken | str, now: int, keys: Mapping[str, Any]) -> SoapAttestation:
        """Validate the token for ``idp_id``; pending state is cleared either way."""
        stored = self.pending.pop(idp_id, None)
        if stored is None:
            raise ProverError("no-pending-request", idp_id)
        return complete(token, stored, self.cache, now, config=self.config, keys=keys)

    def run_all(
        self,
        safety_number: Any,
        idp_ids: Iterable[str],
        *,
        authorize: Callable[[str, str], str],
        exchange: Callable[[TokenExchange], str],
        jwks: Callable[[str], Mapping[str, Any]],
        clock: Callable[[], int],
    ) -> dict[str, SoapAttestation | SoapError]:
        """Run one SOAP flow per IdP in sequence.

        ``authorize(idp_id, url)`` drives the browser and returns the redirect
        URL, ``exchange`` redeems the code and returns the compact token.  A
        failure for one IdP is recorded and does not stop the others.
        """
        results: dict[str, SoapAttestation | SoapError] = {}
        for idp_id in idp_ids:
            try:
                url = self.start(safety_number, idp_id, clock())
                intent = self.on_redirect(authorize(idp_id, url))
                token = exchange(intent)
                results[idp_id] = self.finish(idp_id, token, clock(), jwks(idp_id))
            except SoapError as exc:
                self.pending.pop(idp_id, None)
                results[idp_id] = exc
        return results

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {"pending": {k: v.to_dict() for k, v in sorted(self.pending.items())},
                "replay_cache": self.cache.to_dict()}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path, config: ProverConfig, *, source: RandomSource | None = None) -> "Prover":
        data = json.loads(Path(path).read_text())
        prover = cls(config, source=source, cache=ReplayCache.from_dict(data.get("replay_cache", {})))
        prover.pending = {k: SoapRequestState.from_dict(v) for k, v in data.get("pending", {}).items()}
        return prover


__all__ = [
    "PROTOCOL_VERSION", "SCOPE", "IdpRegistration", "ProverConfig", "SoapRequestState", "TokenExchange",
    "SoapAttestation", "ReplayCache", "prune_cache", "start_soap", "handle_redirect", "complete",
    "authorization_params", "split_redirect", "Prover",
]
