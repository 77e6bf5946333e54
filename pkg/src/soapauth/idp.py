"""In-process mock OpenID Connect provider (authorization code flow + PKCE)."""

from __future__ import annotations

import hmac
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping
from urllib.parse import parse_qsl, urlencode, urlsplit, urlunsplit

from . import crypto
from .crypto import RandomSource, SigningKeyPair, b64url_encode
from .errors import IdpError, TokenError
from .idtoken import DEFAULT_SKEW, IdToken, IdTokenClaims, check_lifetime, encode_token
from .trace import Trace

CODE_LIFETIME = 600
DEFAULT_TOKEN_LIFETIME = 3600
AUTHORIZATION_PARAMS = ("client_id", "redirect_uri", "scope", "response_type", "state", "nonce",
                        "code_challenge", "code_challenge_method")
TOKEN_PARAMS = ("grant_type", "code", "code_verifier", "client_id", "redirect_uri")


@dataclass
class Account:
    username: str
    password: str
    email: str
    subject: str


@dataclass
class AuthCodeRecord:
    code: str
    client_id: str
    redirect_url: str
    code_challenge: str
    nonce_field: str
    subject: str
    email: str
    issued_at: int
    redeemed: bool = False

    def expired(self, now: int) -> bool:
        return now > self.issued_at + CODE_LIFETIME


@dataclass(frozen=True)
class AuthorizationResponse:
    """Outcome of the authorization endpoint: where the browser is sent next."""

    location: str
    redirect_url: str
    code: str | None
    state: str | None
    subject: str | None = None
    nonce: str | None = None
    error: str | None = None


@dataclass
class _KeyEntry:
    key: SigningKeyPair
    last_expiry: int | None = None


def _with_query(url: str, params: Mapping[str, str]) -> str:
    parts = urlsplit(url)
    query = parse_qsl(parts.query, keep_blank_values=True) + list(params.items())
    return urlunsplit(parts._replace(query=urlencode(query)))


def _valid_url(url: object) -> bool:
    if not isinstance(url, str):
        return False
    parts = urlsplit(url)
    return bool(parts.scheme) and bool(parts.netloc or parts.path) and not parts.fragment


class IdentityProvider:
    """A single IdP state machine.

    Endpoint methods take the same parameter maps that travel on the wire and
    record each map as an ``IdpObservation`` on the trace, so privacy checks
    see exactly what the provider saw.  Calls must be serialized.
    """

    def __init__(
        self,
        issuer: str,
        *,
        idp_id: str | None = None,
        source: RandomSource | None = None,
        clock: Callable[[], int] | None = None,
        token_lifetime: int = DEFAULT_TOKEN_LIFETIME,
        algorithm: str = "RS256",
        trace: Trace | None = None,
        skew: int = DEFAULT_SKEW,
    ):
        try:
            self.token_lifetime = check_lifetime(token_lifetime)
        except TokenError as exc:
            raise IdpError(exc.code, exc.detail) from exc
        self.issuer = issuer.rstrip("/")
        self.idp_id = idp_id or self.issuer
        self.source = source or RandomSource()
        self.clock = clock or (lambda: int(time.time()))
        self.algorithm = algorithm
        self.trace = trace
        self.skew = skew
        self.clients: dict[str, tuple[str, ...]] = {}
        self.accounts: dict[str, Account] = {}
        self.sessions: dict[str, str] = {}
        self.codes: dict[str, AuthCodeRecord] = {}
        self.consent: set[tuple[str, str]] = set()
        self.compromised = {"signing_keys": False, "domain": False}
        self._keys: list[_KeyEntry] = []
        self.rotate_keys()

    # -- keys & metadata ---------------------------------------------------

    @property
    def signing_key(self) -> SigningKeyPair:
        return self._keys[-1].key

    def rotate_keys(self) -> SigningKeyPair:
        key = crypto.generate_signing_key(self.algorithm, source=self.source)
        self._keys.append(_KeyEntry(key))
        return key

    def jwks(self) -> dict:
        """Active key plus retired keys whose tokens may still be live."""
        now = self.clock()
        live = [e.key for e in self._keys[:-1]
                if e.last_expiry is not None and e.last_expiry + self.skew >= now]
        return crypto.jwks_document(live + [self.signing_key])

    def discovery_document(self) -> dict[str, str]:
        return {
            "issuer": self.issuer,
            "authorization_endpoint": f"{self.issuer}/authorize",
            "token_endpoint": f"{self.issuer}/token",
            "jwks_uri": f"{self.issuer}/jwks",
        }

    def leak_signing_key(self) -> SigningKeyPair:
        if not self.compromised["signing_keys"]:
            raise IdpError("not-compromised", "signing keys are not compromised")
        return self.signing_key

    # -- registration ------------------------------------------------------

    def register_client(self, redirect_urls: list[str]) -> str:
        urls = list(redirect_urls or [])
        if not urls or len(set(urls)) != len(urls) or not all(_valid_url(u) for u in urls):
            raise IdpError("invalid-registration", "need distinct, syntactically valid redirect URLs")
        client_id = "client-" + self.source.token_bytes(8).hex()
        self.clients[client_id] = tuple(urls)
        return client_id

    def add_account(self, username: str, password: str, email: str) -> str:
        if username in self.accounts:
            raise IdpError("account-exists", username)
        subject = self.source.token_bytes(8).hex()
        self.accounts[username] = Account(username, password, email, subject)
        return subject

    def login(self, username: str, password: str) -> str:
        """Password login; returns a bearer session cookie."""
        account = self.accounts.get(username)
        if account is None or not hmac.compare_digest(account.password, password):
            raise IdpError("auth-failed", username)
        cookie = b64url_encode(self.source.token_bytes(32))
        self.sessions[cookie] = username
        return cookie

    def _observe(self, endpoint: str, params: Mapping[str, str]) -> None:
        if self.trace is not None:
            self.trace.emit("IdpObservation", idp=self.idp_id, endpoint=endpoint, fields=dict(params))

    # -- endpoints ---------------------------------------------------------

    def handle_authorization_request(
        self,
        params: Mapping[str, str],
        *,
        session: str | None = None,
        credentials: tuple[str, str] | None = None,
        consent: str | None = None,
    ) -> AuthorizationResponse:
        """Authorization endpoint.

        ``consent`` is ``"grant"``, ``"deny"`` or ``None``; ``None`` succeeds
        only when the user already consented to this client before.
        """
        self._observe("authorization", params)
        client_id = params.get("client_id")
        redirect_url = params.get("redirect_uri")
        if client_id not in self.clients:
            raise IdpError("unknown-client", str(client_id))
        if redirect_url not in self.clients[client_id]:
            raise IdpError("redirect-mismatch", str(redirect_url))
        if params.get("response_type") != "code":
            raise IdpError("unsupported-response-type", str(params.get("response_type")))
        if params.get("code_challenge_method") != "S256" or not params.get("code_challenge"):
            raise IdpError("invalid-request", "S256 code challenge required")

        username = self.sessions.get(session) if session else None
        if username is None:
            if credentials is None:
                raise IdpError("auth-failed", "no session")
            self.login(*credentials)
            username = credentials[0]
        account = self.accounts[username]

        state = params.get("state")
        remembered = (username, client_id) in self.consent
        if consent == "deny" or (consent is None and not remembered):
            query = {"error": "access_denied"}
            if state is not None:
                query["state"] = state
            return AuthorizationResponse(_with_query(redirect_url, query), redirect_url, None, state,
                                         error="access_denied")
        self.consent.add((username, client_id))

        code = b64url_encode(self.source.token_bytes(32))
        nonce = params.get("nonce", "")
        self.codes[code] = AuthCodeRecord(code, client_id, redirect_url, params["code_challenge"],
                                          nonce, account.subject, account.email, self.clock())
        query = {"code": code}
        if state is not None:
            query["state"] = state
        return AuthorizationResponse(_with_query(redirect_url, query), redirect_url, code, state,
                                     subject=account.subject, nonce=nonce)

    authorization_endpoint = handle_authorization_request

    def token_endpoint(self, form: Mapping[str, str]) -> dict[str, str]:
        """Token endpoint on wire parameters; returns ``{"id_token": ...}``."""
        self._observe("token", form)
        if form.get("grant_type") != "authorization_code":
            raise IdpError("unsupported-grant-type", str(form.get("grant_type")))
        token = self._redeem(form.get("code"), form.get("code_verifier"),
                             form.get("client_id"), form.get("redirect_uri"))
        return {"id_token": token.compact}

    def handle_token_request(self, code: str, code_verifier: str, client_id: str, redirect_url: str) -> IdToken:
        form = {"grant_type": "authorization_code", "code": code, "code_verifier": code_verifier,
                "client_id": client_id, "redirect_uri": redirect_url}
        self._observe("token", form)
        return self._redeem(code, code_verifier, client_id, redirect_url)

    def _redeem(self, code, code_verifier, client_id, redirect_url) -> IdToken:
        now = self.clock()
        record = self.codes.get(code) if isinstance(code, str) else None
        if record is None or record.expired(now):
            raise IdpError("invalid-grant", "unknown or expired code")
        if record.redeemed:
            if self.trace is not None:
                self.trace.emit("CodeReplay", idp=self.idp_id, code=code)
            raise IdpError("invalid-grant", "code already redeemed")
        if client_id != record.client_id or redirect_url != record.redirect_url:
            raise IdpError("invalid-client", "client or redirect does not match the code")
        if not code_verifier or not isinstance(code_verifier, str) or not hmac.compare_digest(
                crypto.pkce_challenge(code_verifier), record.code_challenge):
            raise IdpError("invalid-pkce", "code verifier does not open the challenge")
        record.redeemed = True
        claims = IdTokenClaims(self.issuer, record.client_id, record.subject, record.email,
                               record.nonce_field, now, now + self.token_lifetime)
        entry = self._keys[-1]
        entry.last_expiry = max(entry.last_expiry or 0, claims.expires_at)
        return encode_token(claims, entry.key)

    def issue_token(self, username: str, client_id: str, nonce: str) -> IdToken:
        """Sign a token directly, bypassing the flow (test and forgery helper)."""
        account = self.accounts[username]
        now = self.clock()
        claims = IdTokenClaims(self.issuer, client_id, account.subject, account.email, nonce,
                               now, now + self.token_lifetime)
        entry = self._keys[-1]
        entry.last_expiry = max(entry.last_expiry or 0, claims.expires_at)
        return encode_token(claims, entry.key)
