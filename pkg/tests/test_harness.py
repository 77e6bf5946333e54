import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soapauth.errors import ScenarioError
from soapauth.harness import (
    Scenario,
    World,
    WorldConfig,
    check_privacy_leakage,
    check_sender_correspondence,
    run_scenario,
)
from soapauth.harness.checks import minimal_witness
from soapauth.trace import Trace, TraceEvent, check_trace_shape

import oracles
import tracegen


def hand_trace(*extra):
    """Bob's key sends m1 to alice; the IdP message for bob's account came from the adversary."""
    return tracegen.build([
        ("SendMessaging", {"send_key": "kb", "rcv_key": "ka", "m": "att"}, "bob"),
        ("SendIdP", {"idp": "I", "acc": "bob", "m": "n"}, "adversary"),
        ("ReceiveMessaging", {"send_key": "kb", "rcv_key": "ka", "m": "att"}, None),
        ("ReceiveIdP", {"idp": "I", "acc": "bob", "m": "n"}, None),
        ("Correspond", {"verifier": "alice", "send_key": "kb", "idp": "I", "acc": "bob"}, None),
        *extra,
    ])


# -- trace plumbing -------------------------------------------------------------


def test_trace_tick_discipline():
    trace = Trace()
    trace.emit("IsMessagingApp", app="x")
    trace.emit_send("SendIdP", "bob", idp="I", acc="a", m="n")
    trace.emit("ReceiveIdP", idp="I", acc="a", m="n")
    assert [e.tick for e in trace] == [1, 2, 2, 3]
    check_trace_shape(trace.events)
    with pytest.raises(ValueError):
        trace.emit("Sender", agent="x")
    with pytest.raises(ValueError):
        trace.emit_send("ReceiveIdP", "x")
    bad = [TraceEvent(1, "IsMessagingApp"), TraceEvent(1, "Sender", {"agent": "x"})]
    with pytest.raises(AssertionError):
        check_trace_shape(bad)


def test_trace_jsonl_round_trip():
    trace = hand_trace()
    again = Trace.from_jsonl(trace.to_jsonl())
    assert again.events == trace.events
    assert again.to_jsonl() == trace.to_jsonl()


# -- sender correspondence ----------------------------------------------------------


def test_hand_trace_violated_with_witness():
    trace = hand_trace()
    verdict = check_sender_correspondence(trace)
    assert not verdict.holds
    assert oracles.sender_correspondence(trace.events) is False
    kinds = sorted(e.kind for e in verdict.witness)
    assert kinds == ["Correspond", "ReceiveIdP", "ReceiveMessaging"]
    # the witness re-fails in isolation
    assert not check_sender_correspondence(verdict.witness).holds


@pytest.mark.parametrize("extra,disjunct", [
    (("CompromisedIdP", {"idp": "I"}, None), "idp-keys"),
    (("CompromisedDomain", {"name": "I"}, None), "idp-domain"),
    (("CompromisedAccount", {"agent": "bob", "idp": "I", "acc": "bob"}, None), "account"),
    (("CompromisedMessaging", {"agent": "bob", "key": "kb"}, None), "messaging-key"),
])
def test_disjunct_excuses_violation(extra, disjunct):
    trace = hand_trace(extra)
    verdict = check_sender_correspondence(trace)
    assert verdict.holds and verdict.attributed_to == [disjunct]
    assert not check_sender_correspondence(trace, threat_model=False).holds


def test_redirect_clause_needs_all_three_facts():
    app = ("IsMessagingApp", {"app": "app"}, None)
    url = ("IsRedirectURL", {"idp": "I", "app": "app", "url": "https://app/cb/I"}, None)
    dom = ("CompromisedDomain", {"name": "https://app/cb/I"}, None)
    assert check_sender_correspondence(hand_trace(app, url, dom)).attributed_to == ["redirect-domain"]
    for partial in [(app, url), (url, dom), (app, dom)]:
        assert not check_sender_correspondence(hand_trace(*partial)).holds


def test_unrelated_compromise_does_not_excuse():
    trace = hand_trace(("CompromisedIdP", {"idp": "J"}, None), ("CompromisedMessaging", {"agent": "x", "key": "kx"}, None))
    assert not check_sender_correspondence(trace).holds


def test_send_must_precede_receive():
    trace = tracegen.build([
        ("ReceiveMessaging", {"send_key": "k", "rcv_key": "r", "m": "m"}, None),
        ("SendMessaging", {"send_key": "k", "rcv_key": "r", "m": "m"}, "bob"),
        ("SendIdP", {"idp": "I", "acc": "a", "m": "n"}, "bob"),
        ("ReceiveIdP", {"idp": "I", "acc": "a", "m": "n"}, None),
        ("Correspond", {"verifier": "v", "send_key": "k", "idp": "I", "acc": "a"}, None),
    ])
    assert not check_sender_correspondence(trace).holds
    assert oracles.sender_correspondence(trace.events) is False


def test_minimal_witness_single_event_minimality():
    trace = hand_trace(("IsMessagingApp", {"app": "noise"}, None))
    verdict = check_sender_correspondence(trace)
    w = list(verdict.witness)
    for i in range(len(w)):
        assert check_sender_correspondence(w[:i] + w[i + 1:]).holds


def test_minimal_witness_generic():
    assert minimal_witness([1, 2, 3, 4], lambda xs: 3 in xs) == (3,)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([
    ("CompromisedIdP", {"idp": "I"}, None),
    ("CompromisedDomain", {"name": "I"}, None),
    ("CompromisedMessaging", {"agent": "A", "key": "k1"}, None),
    ("CompromisedAccount", {"agent": "A", "idp": "I", "acc": "a1"}, None),
    ("CompromisedDomain", {"name": "https://app/cb/I"}, None),
]))
def test_compromise_monotonicity(seed, compromise):
    for trace in tracegen.random_traces(5, seed):
        if check_sender_correspondence(trace).holds:
            extended = Trace(trace.events)
            extended.emit(*compromise[:1], **compromise[1])
            assert check_sender_correspondence(extended).holds


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_witness_self_check_property(seed):
    for trace in tracegen.random_traces(5, seed):
        for tm in (True, False):
            verdict = check_sender_correspondence(trace, threat_model=tm)
            assert verdict.holds == oracles.sender_correspondence(trace.events, tm)
            if not verdict.holds:
                assert not check_sender_correspondence(verdict.witness, threat_model=tm).holds


# -- privacy ----------------------------------------------------------------------


def honest_run(sn_peer="alice", seed=5):
    w = World(WorldConfig(hash_profile="test"), seed=seed)
    for name in ("alice", "bob", "carol"):
        w.add_agent(name)
    att = w.browse("bob", w.start_soap("bob", "idpA", w.safety_number_between("bob", sn_peer)))
    w.send("bob", sn_peer, att.to_json())
    return w, att


def test_privacy_honest_run_fields():
    w, _ = honest_run()
    verdict = check_privacy_leakage(w.trace, "idpA")
    assert verdict.holds
    assert verdict.details["observed_fields"] == sorted([
        "client_id", "redirect_uri", "scope", "response_type", "state", "nonce", "code_challenge",
        "code_challenge_method", "code_verifier", "code", "grant_type"])
    assert check_privacy_leakage(w.trace, "idpB").details["observations"] == 0


def test_privacy_negative_control_salt_leak():
    """A buggy prover that appends the salt to its authorization request."""
    w, att = honest_run()
    obs = w.trace.of_kind("IdpObservation")[0]
    leaky = dict(obs["fields"], login_hint=att.salt.b64)
    events = [e if e is not obs else TraceEvent(e.tick, e.kind, dict(e.args, fields=leaky), e.time)
              for e in w.trace.events]
    verdict = check_privacy_leakage(events, "idpA")
    assert not verdict.holds
    assert {"field": "login_hint", "secret": att.salt.b64} in verdict.details["leaks"]


def test_privacy_detects_hex_encoded_secret():
    w, att = honest_run()
    obs = w.trace.of_kind("IdpObservation")[0]
    leaky = dict(obs["fields"], state=att.salt.bytes.hex())
    events = [e if e is not obs else TraceEvent(e.tick, e.kind, dict(e.args, fields=leaky), e.time)
              for e in w.trace.events]
    assert not check_privacy_leakage(events, "idpA").holds


def test_privacy_explicit_secret():
    w, _ = honest_run()
    sn = w.safety_number_between("bob", "alice")
    assert check_privacy_leakage(w.trace, "idpA", secrets=[sn.digest]).holds


# -- scenario engine -----------------------------------------------------------------


def _scenario(**kw):
    base = {"seed": 3, "agents": ["alice", "bob"], "compromises": [], "script": [], "expectations": [],
            "config": {"hash_profile": "test"}}
    base.update(kw)
    return Scenario.from_dict(base)


def test_empty_script_yields_setup_events_only():
    run = run_scenario(_scenario())
    kinds = {e.kind for e in run.trace}
    assert kinds == {"IsMessagingApp", "IsRedirectURL"}
    assert run.steps == []


def test_happy_script_order():
    run = run_scenario(_scenario(script=[
        {"op": "run_soap", "agent": "bob", "idp": "idpA", "peer": "alice"},
        {"op": "forward_attestation", "agent": "bob", "idp": "idpA", "to": "alice"},
        {"op": "verify", "agent": "alice", "from": "bob"},
    ]))
    assert all(s.ok for s in run.steps)
    kinds = [e.kind for e in run.trace if e.kind != "IdpObservation"]
    assert kinds.index("SendIdP") < kinds.index("SendMessaging") < kinds.index("ReceiveMessaging")
    assert kinds[-1] == "Correspond"


def test_determinism_byte_identical():
    sc = Scenario.load(__import__("soapauth.cli", fromlist=["x"]).bundled_scenarios()["redirect_leak"])
    a = run_scenario(sc, "leak").trace.to_jsonl()
    b = run_scenario(sc, "leak").trace.to_jsonl()
    assert a == b
    sc.seed += 1
    assert run_scenario(sc, "leak").trace.to_jsonl() != a


def test_unknown_agent_is_scenario_error():
    with pytest.raises(ScenarioError) as exc:
        run_scenario(_scenario(script=[{"op": "run_soap", "agent": "zed", "idp": "idpA", "peer": "alice"}]))
    assert exc.value.code == "scenario-error"


@pytest.mark.parametrize("bad", [
    {"compromises": [{"directive": "quantum", "subject": "bob"}]},
    {"script": [{"op": "teleport"}]},
    {"script": "nope"},
    {"surprise": 1},
    {"config": {"colour": "red"}},
])
def test_malformed_scenarios(bad):
    with pytest.raises(ScenarioError):
        run_scenario(_scenario(**bad))


def test_adversary_cannot_use_unknown_knowledge():
    run = run_scenario(_scenario(script=[
        {"id": "x", "op": "adversary_token_exchange", "idp": "idpA", "code": "$revealed.bob.idpA"}]))
    assert run.step("x").error == "unknown-knowledge"


def test_unmodeled_host_is_noop():
    run = run_scenario(_scenario(script=[
        {"id": "x", "op": "adversary_trigger_get", "target": "bob", "url": "https://elsewhere.example/x"}]))
    assert run.step("x").ok
    assert {e.kind for e in run.trace} == {"IsMessagingApp", "IsRedirectURL"}


def test_key_server_compromise_grants_substitution():
    run = run_scenario(_scenario(
        compromises=[{"directive": "key-server", "subject": "keyserver"}],
        script=[{"id": "sub", "op": "adversary_substitute_key", "victim": "bob"}],
        expectations=[]))
    assert run.step("sub").ok
    assert run.world.safety_number_between("alice", "bob") != run.world.honest_safety_number("alice", "bob")
    assert any(e.kind == "CompromisedDomain" and e["name"] == "keyserver" for e in run.trace)
    honest = run_scenario(_scenario(script=[{"id": "sub", "op": "adversary_substitute_key", "victim": "bob"}]))
    assert honest.step("sub").error == "not-compromised"


def test_line_references_in_loaded_file(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({
        "seed": 1, "agents": ["alice", "bob"], "config": {"hash_profile": "test"},
        "script": [{"id": "a", "op": "advance_time", "seconds": 5}],
        "expectations": [{"step": "a", "ok": True}, {"step": "a", "error": "nope"}],
    }, indent=2))
    sc = Scenario.load(path)
    from soapauth.harness.scenario import execute
    (outcome,) = execute(sc)
    lines = path.read_text().splitlines()
    met, unmet = outcome.results
    assert met.met and not unmet.met
    assert '"nope"' in "\n".join(lines[unmet.line - 1:unmet.line + 4])
