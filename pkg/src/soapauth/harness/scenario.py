"""Scenario files: load, execute against a fresh :class:`World`, check expectations.

A scenario is JSON::

    {"name": ..., "seed": 7, "config": {...}, "agents": [...],
     "compromises": [{"directive": "redirect-leak", "subject": "bob"}],
     "script": [{"id": "s1", "op": "start_soap", "agent": "bob", ...}, ...],
     "expectations": [{"step": "s1", "error": "state-mismatch"}, ...],
     "variants": [{"name": ..., "compromises": [...], "expectations": [...]}]}

Values of the form ``"$name"`` are resolved at execution time: for the
adversary from its knowledge only, for honest agents from earlier ``as``
bindings.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from ..errors import ScenarioError, SoapError
from ..messaging import SafetyNumber
from ..prover import SoapAttestation
from ..trace import Trace
from ..verifier import VerificationReport
from .checks import Verdict, check_privacy_leakage, check_sender_correspondence
from .world import ADVERSARY, World, WorldConfig


@dataclass
class Scenario:
    name: str
    seed: int
    agents: list[Any]
    compromises: list[dict[str, Any]]
    script: list[dict[str, Any]]
    expectations: list[dict[str, Any]]
    config: dict[str, Any] = field(default_factory=dict)
    variants: list[dict[str, Any]] = field(default_factory=list)
    description: str = ""
    lines: dict[str, list[int]] = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: dict[str, Any], *, name: str = "scenario") -> "Scenario":
        known = {"name", "seed", "agents", "compromises", "script", "expectations", "config",
                 "variants", "description"}
        if not isinstance(data, dict):
            raise ScenarioError("scenario-error", "scenario must be a JSON object")
        unknown = set(data) - known
        if unknown:
            raise ScenarioError("scenario-error", f"unknown scenario fields {sorted(unknown)}")
        script = data.get("script", [])
        if not isinstance(script, list) or not all(isinstance(s, dict) and "op" in s for s in script):
            raise ScenarioError("scenario-error", "script must be a list of {op: ...} objects")
        return cls(
            name=data.get("name", name),
            seed=int(data.get("seed", 0)),
            agents=list(data.get("agents", [])),
            compromises=list(data.get("compromises", [])),
            script=script,
            expectations=list(data.get("expectations", [])),
            config=dict(data.get("config", {})),
            variants=list(data.get("variants", [])),
            description=data.get("description", ""),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        text = Path(path).read_text()
        data = json.loads(text)  # JSONDecodeError carries line/column
        scenario = cls.from_dict(data, name=Path(path).stem)
        scenario.lines = _array_element_lines(text)
        return scenario


def _array_element_lines(text: str) -> dict[str, list[int]]:
    """Line numbers of elements of the ``script``/``expectations`` arrays.

    Keys are ``"script"``, ``"expectations"`` and ``"variants[i].expectations"``.
    """
    decoder = json.JSONDecoder()
    out: dict[str, list[int]] = {}
    variant_idx = -1
    for match in re.finditer(r'"(script|expectations|variants)"\s*:\s*\[', text):
        key = match.group(1)
        depth = _depth_at(text, match.start())
        if key == "variants":
            continue
        if depth > 1:
            variant_idx += 1
            key = f"variants[{variant_idx}].{key}"
        lines = []
        pos = match.end()
        while True:
            while pos < len(text) and text[pos] in " \t\r\n,":
                pos += 1
            if pos >= len(text) or text[pos] == "]":
                break
            lines.append(text.count("\n", 0, pos) + 1)
            _, pos = decoder.raw_decode(text, pos)
        out[key] = lines
    return out


def _depth_at(text: str, end: int) -> int:
    depth, in_str, escaped = 0, False, False
    for ch in text[:end]:
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch in "{[":
            depth += 1
        elif ch in "}]":
            depth -= 1
    return depth


@dataclass
class StepResult:
    index: int
    id: str
    op: str
    ok: bool
    error: str | None = None
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "id": self.id, "op": self.op, "ok": self.ok,
                "error": self.error, "detail": self.detail}


@dataclass
class ScenarioRun:
    scenario: Scenario
    variant: str | None
    world: World
    steps: list[StepResult]
    vars: dict[str, Any]

    @property
    def trace(self) -> Trace:
        return self.world.trace

    def step(self, step_id: str) -> StepResult:
        for s in self.steps:
            if s.id == step_id:
                return s
        raise ScenarioError("scenario-error", f"no step with id {step_id!r}")


class _MissingKnowledge(SoapError):
    def __init__(self, name: str):
        super().__init__("unknown-knowledge", f"adversary does not know {name!r}")


class Executor:
    def __init__(self, world: World):
        self.world = world
        self.vars: dict[str, Any] = {}

    # -- value resolution --------------------------------------------------

    def resolve(self, value: Any, actor: str) -> Any:
        if isinstance(value, str) and value.startswith("$"):
            return self._lookup(value[1:], actor)
        if isinstance(value, dict):
            return {k: self.resolve(v, actor) for k, v in value.items()}
        if isinstance(value, list):
            return [self.resolve(v, actor) for v in value]
        return value

    def _lookup(self, name: str, actor: str) -> Any:
        store = self.world.knowledge if actor == ADVERSARY else {**self.world.knowledge, **self.vars}
        parts = name.split(".")
        for cut in range(len(parts), 0, -1):
            key = ".".join(parts[:cut])
            if key in store:
                value = store[key]
                for attr in parts[cut:]:
                    value = value[attr] if isinstance(value, dict) else getattr(value, attr)
                return value
        if actor == ADVERSARY:
            raise _MissingKnowledge(name)
        raise ScenarioError("scenario-error", f"unbound variable ${name}")

    def _safety_number(self, spec: Any, actor: str) -> SafetyNumber:
        spec = self.resolve(spec, actor)
        if isinstance(spec, SafetyNumber):
            return spec
        if isinstance(spec, list) and len(spec) == 2:
            return self.world.safety_number_between(spec[0], spec[1])
        if isinstance(spec, str):
            return SafetyNumber.from_hex(spec)
        raise ScenarioError("scenario-error", f"bad safety number spec {spec!r}")

    @staticmethod
    def _attestation(value: Any) -> str:
        if isinstance(value, SoapAttestation):
            return value.to_json()
        if isinstance(value, str):
            return value
        raise ScenarioError("scenario-error", f"not an attestation: {value!r}")

    # -- operations --------------------------------------------------------

    def run_step(self, step: dict[str, Any]) -> Any:
        op = step["op"]
        handler: Callable[[dict[str, Any]], Any] | None = getattr(self, f"op_{op}", None)
        if handler is None:
            raise ScenarioError("scenario-error", f"unknown op {op!r}")
        result = handler(step)
        if isinstance(result, VerificationReport):
            if not result.ok:
                raise _ReportError(result)
            result = result.identity
        if "as" in step:
            self.vars[step["as"]] = result
            if step.get("agent") == ADVERSARY or op.startswith("adversary_"):
                self.world.knowledge[step["as"]] = result
        return result

    def _actor(self, step: dict[str, Any]) -> str:
        name = step.get("agent", ADVERSARY if step["op"].startswith("adversary_") else None)
        if name is None:
            raise ScenarioError("scenario-error", f"step {step.get('id')!r} needs an agent")
        self.world.agent(name)
        return name

    def op_start_soap(self, step):
        actor = self._actor(step)
        if "safety_number" in step:
            sn = self._safety_number(step["safety_number"], actor)
        else:
            sn = self.world.safety_number_between(actor, step["peer"])
        return self.world.start_soap(actor, step["idp"], sn)

    def op_browse(self, step):
        actor = self._actor(step)
        return self.world.browse(actor, self.resolve(step["url"], actor), peer=step.get("peer"))

    def op_deliver_redirect(self, step):
        actor = self._actor(step)
        return self.world.app_redirect(actor, self.resolve(step["url"], actor))

    def op_run_soap(self, step):
        """start_soap + browse by the same agent: one complete honest run."""
        actor = self._actor(step)
        url = self.op_start_soap(step)
        return self.world.browse(actor, url)

    def op_forward_attestation(self, step):
        actor = self._actor(step)
        if "attestation" in step:
            value = self.resolve(step["attestation"], actor)
        else:
            attestations = self.world.agent(actor).attestations
            if step.get("idp") not in attestations:
                raise ScenarioError("scenario-error", f"{actor} holds no attestation for {step.get('idp')!r}")
            value = attestations[step["idp"]]
        self.world.send(actor, step["to"], self._attestation(value), key_of=step.get("key_of"))

    def op_send(self, step):
        actor = self._actor(step)
        payload = self.resolve(step["payload"], actor)
        if isinstance(payload, SoapAttestation):
            payload = payload.to_json()
        self.world.send(actor, step["to"], str(payload), key_of=step.get("key_of"))

    def op_verify(self, step) -> VerificationReport:
        return self.world.verify(self._actor(step), step["from"])

    def op_publish(self, step):
        actor = self._actor(step)
        value = self.resolve(step["value"], actor)
        if step.get("link"):
            if not isinstance(value, SoapAttestation):
                raise ScenarioError("scenario-error", "only attestations can be published as links")
            value = value.to_link(self.world.config.app_base)
        self.world.knowledge[f"pub.{step['name']}"] = value
        return value

    def op_advance_time(self, step):
        self.world.tick(int(step["seconds"]))

    def op_enable_compromise(self, step):
        self.world.enable_compromise(step["directive"], step["subject"], step.get("idp"))

    def op_adversary_trigger_get(self, step):
        url = self.resolve(step["url"], ADVERSARY)
        return self.world.browse(step["target"], url, peer=step.get("peer"))

    def op_adversary_start_soap(self, step):
        sn = self._safety_number(step["safety_number"], ADVERSARY)
        return self.world.start_soap(ADVERSARY, step["idp"], sn)

    def op_adversary_deliver_redirect(self, step):
        return self.world.app_redirect(ADVERSARY, self.resolve(step["url"], ADVERSARY))

    def op_adversary_send(self, step):
        payload = self.resolve(step["payload"], ADVERSARY)
        if isinstance(payload, SoapAttestation):
            payload = payload.to_json()
        self.world.send(ADVERSARY, step["to"], str(payload), key_of=step.get("key_of"))

    def op_adversary_token_exchange(self, step):
        return self.world.adversary_token_exchange(step["idp"], self.resolve(step["code"], ADVERSARY),
                                                   self.resolve(step.get("code_verifier"), ADVERSARY))

    def op_adversary_register_phone(self, step):
        self.world.adversary_register_phone(step["victim"])

    def op_adversary_substitute_key(self, step):
        self.world.adversary_substitute_key(step["victim"])

    def op_adversary_craft_request(self, step):
        return self.world.craft_authorization_url(step["idp"], self.resolve(step["params"], ADVERSARY))

    def op_adversary_respond_token(self, step):
        token = self.resolve(step["token"], ADVERSARY)
        if isinstance(token, SoapAttestation):
            token = token.token
        self.world.adversary_respond_token(step["idp"], token)

    def op_adversary_forge_attestation(self, step):
        sn = self._safety_number(step["safety_number"], ADVERSARY)
        return self.world.adversary_forge_attestation(step["idp"], step["victim"], sn)

    def op_adversary_register_client(self, step):
        return self.world.adversary_register_client(step["idp"])

    def op_adversary_own_token(self, step):
        client = self.resolve(step.get("client_id", f"$public.{step['idp']}.client_id"), ADVERSARY)
        return self.world.adversary_own_token(step["idp"], client)


class _ReportError(SoapError):
    def __init__(self, report: VerificationReport):
        super().__init__(report.error or "malformed-attestation", report.detail)
        self.report = report


def build_world(scenario: Scenario, compromises: list[dict[str, Any]]) -> World:
    world = World(WorldConfig.from_dict(scenario.config), seed=scenario.seed)
    for spec in scenario.agents:
        if isinstance(spec, str):
            world.add_agent(spec)
        elif isinstance(spec, dict) and "name" in spec:
            world.add_agent(spec["name"], phone=spec.get("phone"), idps=spec.get("idps"))
        else:
            raise ScenarioError("scenario-error", f"bad agent spec {spec!r}")
    for directive in compromises:
        world.enable_compromise(directive["directive"], directive["subject"], directive.get("idp"))
    world.assert_invariants()
    return world


def run_scenario(scenario: Scenario, variant: str | dict[str, Any] | None = None) -> ScenarioRun:
    """Execute ``scenario`` (optionally one of its variants) deterministically."""
    compromises = scenario.compromises
    variant_name = None
    if variant is not None:
        if isinstance(variant, str):
            matches = [v for v in scenario.variants if v.get("name") == variant]
            if not matches:
                raise ScenarioError("scenario-error", f"unknown variant {variant!r}")
            variant = matches[0]
        variant_name = variant.get("name")
        compromises = variant.get("compromises", compromises)
    world = build_world(scenario, compromises)
    executor = Executor(world)
    steps = []
    for i, step in enumerate(scenario.script):
        step_id = str(step.get("id", i))
        world.tick()
        try:
            executor.run_step(step)
            result = StepResult(i, step_id, step["op"], True)
        except ScenarioError:
            raise
        except SoapError as exc:
            result = StepResult(i, step_id, step["op"], False, exc.code, exc.detail)
        except KeyError as exc:
            raise ScenarioError("scenario-error", f"step {step_id!r} missing field {exc}") from exc
        steps.append(result)
        world.assert_invariants()
    return ScenarioRun(scenario, variant_name, world, steps, executor.vars)


# -- expectations --------------------------------------------------------------


@dataclass
class ExpectationResult:
    expectation: dict[str, Any]
    met: bool
    detail: str = ""
    line: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"expectation": self.expectation, "met": self.met, "detail": self.detail, "line": self.line}


def evaluate_expectations(run: ScenarioRun, expectations: list[dict[str, Any]],
                          lines: list[int] | None = None) -> tuple[list[ExpectationResult], list[Verdict]]:
    results = []
    verdicts: dict[str, Verdict] = {}
    for i, exp in enumerate(expectations):
        met, detail = _evaluate_one(run, exp, verdicts)
        line = lines[i] if lines and i < len(lines) else None
        results.append(ExpectationResult(exp, met, detail, line))
    return results, list(verdicts.values())


def _verdict(run: ScenarioRun, exp: dict[str, Any], cache: dict[str, Verdict]) -> Verdict:
    prop = exp["property"]
    if prop == "sender-correspondence":
        threat_model = exp.get("threat_model", True)
        key = f"sc:{threat_model}"
        if key not in cache:
            cache[key] = check_sender_correspondence(run.trace, threat_model=threat_model)
        return cache[key]
    if prop == "privacy":
        key = f"privacy:{exp['idp']}"
        if key not in cache:
            cache[key] = check_privacy_leakage(run.trace, exp["idp"])
        return cache[key]
    raise ScenarioError("scenario-error", f"unknown property {prop!r}")


def _evaluate_one(run: ScenarioRun, exp: dict[str, Any], cache: dict[str, Verdict]) -> tuple[bool, str]:
    if "step" in exp:
        step = run.step(str(exp["step"]))
        if "error" in exp:
            return step.error == exp["error"], f"step {step.id}: ok={step.ok} error={step.error}"
        want = exp.get("ok", True)
        return step.ok == want, f"step {step.id}: ok={step.ok} error={step.error}"
    if "property" in exp:
        verdict = _verdict(run, exp, cache)
        met = verdict.holds == exp.get("holds", True)
        if "attributed_to" in exp:
            met = met and sorted(exp["attributed_to"]) == verdict.attributed_to
        return met, f"{verdict.property}: holds={verdict.holds} attributed_to={verdict.attributed_to}"
    if "var" in exp:
        lookup = Executor(run.world)
        lookup.vars = run.vars
        try:
            value = lookup._lookup(exp["var"], "scenario")
        except ScenarioError as exc:
            return False, str(exc)
        if not isinstance(value, (str, int, float, bool, type(None))):
            value = getattr(value, "__dict__", value)
        return value == exp["equals"], f"{exp['var']} = {value!r}"
    if "safety_number" in exp:
        a, b = exp["safety_number"]
        seen = run.world.safety_number_between(a, b)
        honest = seen == run.world.honest_safety_number(a, b)
        return honest == exp.get("honest", True), f"{a}->{b} safety number honest={honest}"
    if "trace_count" in exp:
        n = len(run.trace.of_kind(exp["trace_count"]))
        return n == exp["equals"], f"{exp['trace_count']} events: {n}"
    raise ScenarioError("scenario-error", f"unknown expectation {exp!r}")


@dataclass
class ScenarioOutcome:
    run: ScenarioRun
    results: list[ExpectationResult]
    verdicts: list[Verdict]

    @property
    def passed(self) -> bool:
        return all(r.met for r in self.results)

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant": self.run.variant,
            "passed": self.passed,
            "steps": [s.to_dict() for s in self.run.steps],
            "expectations": [r.to_dict() for r in self.results],
            "verdicts": [v.to_dict() for v in self.verdicts],
        }


def execute(scenario: Scenario) -> list[ScenarioOutcome]:
    """Run the base scenario, or every variant if any are declared."""
    outcomes = []
    if not scenario.variants:
        run = run_scenario(scenario)
        results, verdicts = evaluate_expectations(run, scenario.expectations, scenario.lines.get("expectations"))
        outcomes.append(ScenarioOutcome(run, results, verdicts))
    for i, variant in enumerate(scenario.variants):
        run = run_scenario(scenario, variant)
        exps = variant.get("expectations", scenario.expectations)
        lines = scenario.lines.get(f"variants[{i}].expectations") if "expectations" in variant \
            else scenario.lines.get("expectations")
        results, verdicts = evaluate_expectations(run, exps, lines)
        outcomes.append(ScenarioOutcome(run, results, verdicts))
    return outcomes
