"""Simulated ecosystem driven by the scenario engine.

The world owns the logical clock, the trace, every IdP, the key server and
all application instances.  Honest agents follow the protocol; the
``adversary`` agent acts only on what it has learned (its *knowledge*),
plus whatever capabilities compromise directives grant it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable
from urllib.parse import parse_qsl, urlencode, urlsplit, urlunsplit

from .. import crypto
from ..crypto import RandomSource, SigningKeyPair
from ..errors import IdpError, MessagingError, ProverError, ScenarioError, SoapError
from ..idp import IdentityProvider
from ..idtoken import DEFAULT_SKEW, IdTokenClaims, build_nonce_field, encode_token
from ..messaging import (
    Channel,
    KeyServer,
    MessagingIdentity,
    SafetyNumber,
    SmsChannel,
    compute_safety_number,
    key_label,
    open_channel,
    register,
)
from ..prover import Prover, ProverConfig, SoapAttestation, split_redirect
from ..trace import Trace, check_trace_shape
from ..verifier import IdpRegistry, TrustedIdp, VerificationReport, check_attestation

EPOCH = 1_700_000_000
APP_ID = "msg-app"
ADVERSARY = "adversary"
DIRECTIVES = ("idp-keys", "idp-domain", "account", "key-server", "messaging-key", "redirect-leak")


@dataclass
class IdpSpec:
    id: str
    issuer: str
    token_lifetime: int = 3600
    algorithm: str = "RS256"

    @classmethod
    def default(cls, idp_id: str) -> "IdpSpec":
        return cls(idp_id, f"https://{idp_id.lower()}.example")


@dataclass
class WorldConfig:
    idps: list[IdpSpec] = field(default_factory=lambda: [IdpSpec.default("idpA"), IdpSpec.default("idpB")])
    app_base: str = "https://msg.example"
    hash_profile: str = crypto.DEFAULT_HASH_PROFILE
    skew: int = DEFAULT_SKEW
    time_step: int = 1

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "WorldConfig":
        known = {"idps", "app_base", "hash_profile", "skew", "time_step"}
        unknown = set(data) - known
        if unknown:
            raise ScenarioError("scenario-error", f"unknown config fields {sorted(unknown)}")
        kwargs = dict(data)
        if "idps" in kwargs:
            idps = []
            for item in kwargs["idps"]:
                if isinstance(item, str):
                    idps.append(IdpSpec.default(item))
                else:
                    spec = IdpSpec.default(item["id"])
                    idps.append(IdpSpec(item["id"], item.get("issuer", spec.issuer),
                                        item.get("token_lifetime", spec.token_lifetime),
                                        item.get("algorithm", spec.algorithm)))
            kwargs["idps"] = idps
        return cls(**kwargs)


@dataclass
class Agent:
    name: str
    identity: MessagingIdentity
    prover: Prover
    credentials: dict[str, tuple[str, str]] = field(default_factory=dict)
    sessions: dict[str, str] = field(default_factory=dict)
    attestations: dict[str, SoapAttestation] = field(default_factory=dict)
    verified: list[Any] = field(default_factory=list)

    @property
    def keypair(self) -> SigningKeyPair:
        return self.identity.keypair


class World:
    def __init__(self, config: WorldConfig | None = None, seed: int = 0):
        self.config = config or WorldConfig()
        self.seed = seed
        self.source = RandomSource(seed)
        self.now = EPOCH
        self.trace = Trace()
        self.trace.clock = lambda: self.now
        self.idps: dict[str, IdentityProvider] = {}
        self.app_config = ProverConfig(self.config.app_base, hash_profile=self.config.hash_profile,
                                       skew=self.config.skew)
        for spec in self.config.idps:
            idp = IdentityProvider(spec.issuer, idp_id=spec.id, source=self.source.fork(f"idp/{spec.id}"),
                                   clock=lambda: self.now, token_lifetime=spec.token_lifetime,
                                   algorithm=spec.algorithm, trace=self.trace, skew=self.config.skew)
            self.idps[spec.id] = idp
            disco = idp.discovery_document()
            redirect = self.app_config.redirect_url_for(spec.id)
            client_id = idp.register_client([redirect])
            self.app_config.register(spec.id, disco["issuer"], client_id,
                                     disco["authorization_endpoint"], disco["token_endpoint"])
        self.registry = IdpRegistry()
        self.refresh_registry()
        self.key_server = KeyServer(self.source.fork("keyserver"))
        self.sms = SmsChannel()
        self.channels: dict[frozenset[bytes], Channel] = {}
        self.agents: dict[str, Agent] = {}
        self.knowledge: dict[str, Any] = {}
        self.controlled_keys: dict[str, SigningKeyPair] = {}
        self.redirect_leaks: set[tuple[str, str | None]] = set()
        self.token_overrides: dict[str, list[str]] = {}
        self._redeemed_codes: set[tuple[str, str]] = set()
        self.trace.emit("IsMessagingApp", app=APP_ID)
        for reg in self.app_config.registrations.values():
            self.trace.emit("IsRedirectURL", idp=reg.idp_id, app=APP_ID, url=reg.redirect_url)
        self._publish_public_knowledge()
        adversary = self.add_agent(ADVERSARY)
        self.controlled_keys[ADVERSARY] = adversary.keypair

    # -- setup -------------------------------------------------------------

    def _publish_public_knowledge(self) -> None:
        self.knowledge["public.app_base"] = self.config.app_base
        for idp_id, reg in self.app_config.registrations.items():
            for attr in ("client_id", "redirect_url", "issuer", "authorization_endpoint", "token_endpoint"):
                self.knowledge[f"public.{idp_id}.{attr}"] = getattr(reg, attr)

    def refresh_registry(self) -> None:
        for idp_id, idp in self.idps.items():
            self.registry.add(TrustedIdp(idp_id, idp.issuer, idp.jwks()))

    def add_agent(self, name: str, *, phone: str | None = None, idps: Iterable[str] | None = None,
                  register_phone: bool = True) -> Agent:
        if name in self.agents:
            raise ScenarioError("scenario-error", f"duplicate agent {name!r}")
        src = self.source.fork(f"agent/{name}")
        identity = MessagingIdentity.generate(phone or f"+1555{len(self.agents):07d}", src)
        agent = Agent(name, identity, Prover(self.app_config, source=src.fork("app")))
        for idp_id in (self.idps if idps is None else idps):
            if idp_id not in self.idps:
                raise ScenarioError("scenario-error", f"unknown IdP {idp_id!r}")
            password = f"pw-{name}-{src.token_bytes(6).hex()}"
            host = urlsplit(self.idps[idp_id].issuer).hostname
            self.idps[idp_id].add_account(name, password, f"{name}@{host}")
            agent.credentials[idp_id] = (name, password)
            self.knowledge[f"public.{idp_id}.subject.{name}"] = self.idps[idp_id].accounts[name].subject
        if register_phone:
            register(identity, self.key_server, self.sms)
        self.agents[name] = agent
        return agent

    def agent(self, name: str) -> Agent:
        try:
            return self.agents[name]
        except KeyError:
            raise ScenarioError("scenario-error", f"unknown agent {name!r}") from None

    def idp(self, idp_id: str) -> IdentityProvider:
        try:
            return self.idps[idp_id]
        except KeyError:
            raise ScenarioError("scenario-error", f"unknown IdP {idp_id!r}") from None

    def tick(self, seconds: int | None = None) -> None:
        self.now += self.config.time_step if seconds is None else seconds

    # -- compromise --------------------------------------------------------

    def enable_compromise(self, directive: str, subject: str, idp: str | None = None) -> None:
        if directive == "idp-keys":
            self.idp(subject).compromised["signing_keys"] = True
            self.trace.emit("CompromisedIdP", idp=subject)
        elif directive == "idp-domain":
            self.idp(subject).compromised["domain"] = True
            self.trace.emit("CompromisedDomain", name=subject)
        elif directive == "account":
            victim = self.agent(subject)
            if idp is None or idp not in victim.credentials:
                raise ScenarioError("scenario-error", "account compromise needs an IdP the agent uses")
            self.knowledge[f"cred.{subject}.{idp}"] = victim.credentials[idp]
            acc = self.idps[idp].accounts[victim.credentials[idp][0]].subject
            self.trace.emit("CompromisedAccount", agent=subject, idp=idp, acc=acc)
        elif directive == "key-server":
            self.key_server.compromised = True
            self.trace.emit("CompromisedDomain", name="keyserver")
        elif directive == "messaging-key":
            victim = self.agent(subject)
            self.controlled_keys[subject] = victim.keypair
            self.trace.emit("CompromisedMessaging", agent=subject, key=key_label(victim.identity.public))
        elif directive == "redirect-leak":
            self.agent(subject)
            self.redirect_leaks.add((subject, idp))
            for reg in self.app_config.registrations.values():
                if idp is None or reg.idp_id == idp:
                    self.trace.emit("CompromisedDomain", name=reg.redirect_url)
        else:
            raise ScenarioError("scenario-error", f"unknown compromise directive {directive!r}")

    # -- messaging ---------------------------------------------------------

    def channel_between(self, key: SigningKeyPair, peer_phone: str, *, peer_key: bytes | None = None) -> Channel:
        if peer_key is None:
            peer_key = self.key_server.lookup(peer_phone)
        endpoints = frozenset((key.public_bytes(), peer_key))
        if endpoints not in self.channels:
            self.channels[endpoints] = open_channel(key.public_bytes(), peer_key, self.trace)
        return self.channels[endpoints]

    def channel_for(self, agent: str, peer: str) -> Channel:
        """The channel ``agent``'s app uses to talk to ``peer``'s phone number."""
        return self.channel_between(self.agent(agent).keypair, self.agent(peer).identity.phone)

    def honest_safety_number(self, a: str, b: str) -> SafetyNumber:
        return compute_safety_number(self.agent(a).identity.public, self.agent(b).identity.public)

    def safety_number_between(self, a: str, b: str) -> SafetyNumber:
        """Safety number ``a``'s app sees for its conversation with ``b``'s phone."""
        return self.channel_for(a, b).safety_number

    def send(self, sender: str, to: str, payload: str, *, key_of: str | None = None) -> None:
        if sender == ADVERSARY:
            owner = key_of or ADVERSARY
            if owner not in self.controlled_keys:
                raise MessagingError("channel-violation", f"adversary holds no key of {owner!r}")
            key = self.controlled_keys[owner]
            # the adversary addresses the recipient's real key, bypassing its own directory entries
            channel = self.channel_between(key, "", peer_key=self.agent(to).identity.public)
        else:
            key = self.agent(sender).keypair
            channel = self.channel_between(key, self.agent(to).identity.phone)
        channel.send(key, payload, sender)
        self._collect_adversary_inbox()

    def receive(self, agent: str, peer: str) -> str | None:
        message = self.channel_for(agent, peer).receive(self.agent(agent).keypair)
        self._collect_adversary_inbox()
        return message

    def _collect_adversary_inbox(self) -> None:
        for owner, key in self.controlled_keys.items():
            for channel in self.channels.values():
                if key.public_bytes() in channel.endpoints:
                    for sender, rcv, payload in channel.transcript:
                        if rcv == key.public_bytes():
                            self.knowledge[f"inbox.{owner}"] = payload

    # -- browser / app -----------------------------------------------------

    def _idp_for_endpoint(self, url: str) -> IdentityProvider | None:
        base = urlunsplit(urlsplit(url)._replace(query="", fragment=""))
        for idp in self.idps.values():
            if idp.discovery_document()["authorization_endpoint"] == base:
                return idp
        return None

    def browse(self, agent_name: str, url: str, *, peer: str | None = None) -> Any:
        """``agent_name``'s browser opens ``url`` and follows any redirect."""
        agent = self.agent(agent_name)
        idp = self._idp_for_endpoint(url)
        if idp is not None:
            return self._authorize(agent, idp, dict(parse_qsl(urlsplit(url).query)))
        app_base = self.config.app_base.rstrip("/")
        if url.startswith(f"{app_base}/soap#"):
            if peer is None:
                raise ScenarioError("scenario-error", "opening an attestation link needs a peer")
            return self.verify(agent_name, peer, payload=SoapAttestation.from_fragment(url).to_json())
        if url.startswith(f"{app_base}/cb/"):
            return self.app_redirect(agent_name, url)
        return None  # unmodeled host

    def _authorize(self, agent: Agent, idp: IdentityProvider, params: dict[str, str]) -> Any:
        if idp.compromised["domain"]:
            self.knowledge[f"obs.{idp.idp_id}.authorize"] = dict(params)
        creds = agent.credentials.get(idp.idp_id)
        session = agent.sessions.get(idp.idp_id)
        if creds is None and session is None:
            raise IdpError("auth-failed", f"{agent.name} has no account at {idp.idp_id}")
        if session is None:
            session = idp.login(*creds)
            agent.sessions[idp.idp_id] = session
        response = idp.handle_authorization_request(params, session=session, consent="grant")
        if response.code is not None:
            self.trace.emit_send("SendIdP", agent.name, idp=idp.idp_id, acc=response.subject,
                                 m=response.nonce)
        for who, scope in self.redirect_leaks:
            if who == agent.name and scope in (None, idp.idp_id):
                self.knowledge[f"leak.{agent.name}"] = response.location
                self.knowledge[f"leak.{agent.name}.{idp.idp_id}"] = response.location
        if response.location.startswith(self.config.app_base.rstrip("/") + "/cb/"):
            return self.app_redirect(agent.name, response.location)
        return response.location

    def post_token(self, idp_id: str, form: dict[str, str]) -> str:
        """POST to the token endpoint; a compromised domain lets the adversary answer."""
        idp = self.idp(idp_id)
        if idp.compromised["domain"]:
            self.knowledge[f"obs.{idp_id}.token"] = dict(form)
            queued = self.token_overrides.get(idp_id)
            if queued:
                return queued.pop(0)
        token = idp.token_endpoint(form)["id_token"]
        code = form["code"]
        assert (idp_id, code) not in self._redeemed_codes, "authorization code redeemed twice"
        self._redeemed_codes.add((idp_id, code))
        return token

    def app_redirect(self, agent_name: str, url: str) -> SoapAttestation:
        """``agent_name``'s app receives a redirect and, if accepted, completes the run."""
        agent = self.agent(agent_name)
        exchange = agent.prover.on_redirect(url)
        _, params = split_redirect(url)
        # CSRF safety: an exchange only ever follows a redirect carrying our own state
        assert crypto.b64url_decode(params["state"]) in {
            s.nonce.bytes for s in agent.prover.pending.values()}, "token exchange without matching state"
        try:
            token = self.post_token(exchange.idp_id, exchange.form())
        except SoapError:
            agent.prover.pending.pop(exchange.idp_id, None)
            raise
        attestation = agent.prover.finish(exchange.idp_id, token, self.now, self.idps[exchange.idp_id].jwks())
        agent.attestations[exchange.idp_id] = attestation
        # codes are revealed once the token has been received
        self.knowledge[f"revealed.{agent_name}.{exchange.idp_id}"] = exchange.code
        return attestation

    def start_soap(self, agent_name: str, idp_id: str, safety_number: SafetyNumber) -> str:
        return self.agent(agent_name).prover.start(safety_number, idp_id, self.now)

    # -- verification ------------------------------------------------------

    def verify(self, agent_name: str, peer: str, *, payload: str | None = None) -> VerificationReport:
        """``agent_name`` verifies the next attestation received from ``peer``."""
        agent = self.agent(agent_name)
        channel = self.channel_for(agent_name, peer)
        if payload is None:
            payload = self.receive(agent_name, peer)
            if payload is None:
                raise MessagingError("no-message", f"nothing from {peer}")
        self.refresh_registry()
        agent.prover.cache.prune(self.now)
        report = check_attestation(payload, channel.safety_number, agent.prover.cache, self.registry,
                                   self.now, self.config.skew, self.config.hash_profile)
        if report.identity is None:
            return report
        ident = report.identity
        peer_key = key_label(next(iter(channel.endpoints - {agent.identity.public})))
        self.trace.emit("ReceiveIdP", idp=ident.idp_id, acc=ident.subject, m=ident.nonce_field)
        self.trace.emit("Correspond", verifier=agent_name, send_key=peer_key, idp=ident.idp_id,
                        acc=ident.subject)
        agent.verified.append(ident)
        return report

    # -- adversary capabilities ---------------------------------------------

    def adversary_register_phone(self, victim: str) -> None:
        """Re-register ``victim``'s phone with the adversary key, reading the OTP off SMS."""
        phone = self.agent(victim).identity.phone
        adv = self.agent(ADVERSARY).identity
        self.key_server.request_registration(phone, adv.public, self.sms)
        otp = self.sms.read(phone)
        self.knowledge[f"sms.{victim}"] = otp
        self.key_server.confirm_registration(phone, otp or "")

    def adversary_substitute_key(self, victim: str) -> None:
        phone = self.agent(victim).identity.phone
        self.key_server.substitute_key(phone, self.agent(ADVERSARY).identity.public)

    def adversary_token_exchange(self, idp_id: str, code: str, code_verifier: str | None = None) -> str:
        reg = self.app_config.registration(idp_id)
        verifier = code_verifier or crypto.b64url_encode(self.source.fork("guess").token_bytes(32))
        form = {"grant_type": "authorization_code", "code": code, "code_verifier": verifier,
                "client_id": reg.client_id, "redirect_uri": reg.redirect_url}
        return self.idp(idp_id).token_endpoint(form)["id_token"]

    def adversary_forge_attestation(self, idp_id: str, victim: str, safety_number: SafetyNumber) -> SoapAttestation:
        """Mint a token for ``victim``; genuine only if the IdP's keys are compromised."""
        idp = self.idp(idp_id)
        src = self.source.fork(f"forge/{self.now}")
        if idp.compromised["signing_keys"]:
            key = idp.leak_signing_key()
        else:
            own = crypto.generate_signing_key(idp.algorithm, source=src)
            key = SigningKeyPair(idp.signing_key.key_id, own.algorithm, own.private, own.public)
        n, salt = src.random_value(), src.random_value()
        h = crypto.salted_hash(safety_number, salt, self.config.hash_profile)
        account = idp.accounts[self.agent(victim).credentials[idp_id][0]]
        claims = IdTokenClaims(idp.issuer, self.app_config.registration(idp_id).client_id, account.subject,
                               account.email, build_nonce_field(n, h), self.now,
                               self.now + idp.token_lifetime)
        return SoapAttestation(encode_token(claims, key).compact, salt, idp_id)

    def adversary_respond_token(self, idp_id: str, token: str) -> None:
        if not self.idp(idp_id).compromised["domain"]:
            raise IdpError("not-compromised", f"{idp_id} domain is honest")
        self.token_overrides.setdefault(idp_id, []).append(token)

    def adversary_register_client(self, idp_id: str) -> str:
        return self.idp(idp_id).register_client([f"https://evil.example/cb/{idp_id}"])

    def adversary_own_token(self, idp_id: str, client_id: str) -> str:
        """Run a complete code flow with the adversary's own account for ``client_id``."""
        idp = self.idp(idp_id)
        src = self.source.fork(f"own/{self.now}")
        verifier = crypto.b64url_encode(src.token_bytes(32))
        redirect = idp.clients[client_id][0]
        params = {"client_id": client_id, "redirect_uri": redirect, "scope": "openid email",
                  "response_type": "code", "state": crypto.b64url_encode(src.token_bytes(32)),
                  "nonce": crypto.b64url_encode(src.token_bytes(32)),
                  "code_challenge": crypto.pkce_challenge(verifier), "code_challenge_method": "S256"}
        adversary = self.agent(ADVERSARY)
        response = idp.handle_authorization_request(params, credentials=adversary.credentials[idp_id],
                                                    consent="grant")
        self.trace.emit_send("SendIdP", ADVERSARY, idp=idp_id, acc=response.subject, m=response.nonce)
        form = {"grant_type": "authorization_code", "code": response.code, "code_verifier": verifier,
                "client_id": client_id, "redirect_uri": redirect}
        return idp.token_endpoint(form)["id_token"]

    def craft_authorization_url(self, idp_id: str, params: dict[str, str]) -> str:
        endpoint = self.idp(idp_id).discovery_document()["authorization_endpoint"]
        return f"{endpoint}?{urlencode(params)}"

    # -- invariants --------------------------------------------------------

    def assert_invariants(self) -> None:
        check_trace_shape(self.trace.events)
        for agent in self.agents.values():
            for state in agent.prover.pending.values():
                assert state.idp_id in self.idps
