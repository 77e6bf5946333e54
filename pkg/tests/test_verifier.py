import json

import pytest

from soapauth.crypto import RandomValue
from soapauth.errors import VerificationError
from soapauth.prover import SoapAttestation
from soapauth.verifier import CHECK_ORDER, IdpRegistry, check_attestation, verify_attestation


@pytest.fixture
def setup(world):
    """bob's attestation for idpA bound to the bob/alice channel, plus alice's view."""
    sn = world.safety_number_between("bob", "alice")
    att = world.browse("bob", world.start_soap("bob", "idpA", sn))
    world.refresh_registry()
    return world, att, sn


def _check(world, att, sn, cache=None, now=None):
    alice = world.agent("alice")
    return check_attestation(att, sn, cache if cache is not None else alice.prover.cache, world.registry,
                             world.now if now is None else now, 60, "test")


def test_success_reports_every_check(setup):
    world, att, sn = setup
    report = _check(world, att, sn)
    assert report.ok
    assert [c for c, ok in report.checks] == list(CHECK_ORDER)
    assert report.identity.email == "bob@idpa.example"
    assert report.identity.safety_number == sn
    doc = report.to_dict()
    assert doc["ok"] and doc["identity"]["idp"] == "idpA"


def test_reflection_detected_by_own_cache(setup):
    world, att, sn = setup
    report = check_attestation(att, sn, world.agent("bob").prover.cache, world.registry, world.now, 60, "test")
    assert report.error == "reflection-detected"


def test_wrong_channel(setup):
    world, att, _ = setup
    other = world.honest_safety_number("alice", "adversary")
    assert _check(world, att, other).error == "safety-number-mismatch"


def test_expired(setup):
    world, att, sn = setup
    assert _check(world, att, sn, now=world.now + 3600 + 61).error == "token-expired"
    assert _check(world, att, sn, now=world.now + 3600 + 60).ok


def test_unknown_issuer(setup):
    world, att, sn = setup
    registry = IdpRegistry.from_dict(world.registry.to_dict())
    del registry.by_issuer["https://idpa.example"]
    report = check_attestation(att, sn, world.agent("alice").prover.cache, registry, world.now, 60, "test")
    assert report.error == "unknown-issuer"


def test_idp_label_must_match_issuer(setup):
    world, att, sn = setup
    relabelled = SoapAttestation(att.token, att.salt, "idpB")
    assert _check(world, relabelled, sn).error == "unknown-issuer"


def test_bad_signature(setup):
    world, att, sn = setup
    header, payload, sig = att.token.split(".")
    tampered = SoapAttestation(f"{header}.{payload}.{sig[:-4]}AAAA", att.salt, att.idp_id)
    assert _check(world, tampered, sn).error == "bad-signature"


def test_wrong_salt_breaks_binding(setup):
    world, att, sn = setup
    other = SoapAttestation(att.token, RandomValue(bytes(32), 256), att.idp_id)
    assert _check(world, other, sn).error == "safety-number-mismatch"


@pytest.mark.parametrize("payload", ["not json", "{}", json.dumps({"v": "soap/2", "idp": "idpA", "token": "a.b.c",
                                                                   "salt": "AAAA"})])
def test_malformed(setup, payload):
    world, _, sn = setup
    report = _check(world, payload, sn)
    assert report.error == "malformed-attestation"
    assert report.checks == [("well-formed", False)]


def test_check_order_first_failure_wins(setup):
    world, att, sn = setup
    # expired and on the wrong channel: expiry is checked first
    other = world.honest_safety_number("alice", "adversary")
    assert _check(world, att, other, now=world.now + 10_000).error == "token-expired"


def test_verify_attestation_raises(setup):
    world, att, sn = setup
    with pytest.raises(VerificationError) as exc:
        verify_attestation(att, world.honest_safety_number("alice", "adversary"),
                           world.agent("alice").prover.cache, world.registry, world.now, 60, "test")
    assert exc.value.code == "safety-number-mismatch"


def test_registry_round_trip(setup):
    world = setup[0]
    data = json.loads(json.dumps(world.registry.to_dict()))
    assert IdpRegistry.from_dict(data).to_dict() == world.registry.to_dict()
    assert set(data["issuers"]) == {"https://idpa.example", "https://idpb.example"}
