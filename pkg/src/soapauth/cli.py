"""Command-line front end.

Exit codes: 0 success, 1 protocol or expectation failure, 2 usage or parse failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from . import crypto
from .crypto import HASH_PROFILES, SIGNATURE_ALGORITHMS, RandomSource, SigningKeyPair
from .errors import ConfigError, ScenarioError, SoapError
from .harness.checks import check_privacy_leakage, check_sender_correspondence
from .harness.scenario import Scenario, execute
from .harness.world import IdpSpec, World, WorldConfig
from .idtoken import DEFAULT_SKEW, check_lifetime
from .messaging import SafetyNumber
from .prover import ReplayCache
from .report import REPORT_SCHEMA, write_report
from .verifier import IdpRegistry, check_attestation

log = logging.getLogger("soapauth")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


# -- configuration -------------------------------------------------------------


def _reject_unknown(data: dict[str, Any], known: set[str], where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError("invalid-config", f"{where} must be an object")
    unknown = set(data) - known
    if unknown:
        raise ConfigError("invalid-config", f"unknown field(s) in {where}: {', '.join(sorted(unknown))}")


@dataclass
class IdpConfig:
    id: str
    issuer: str
    token_lifetime: int = 3600
    algorithm: str = "RS256"
    accounts: list[dict[str, str]] = field(default_factory=list)
    clients: list[list[str]] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "IdpConfig":
        _reject_unknown(data, {"id", "issuer", "token_lifetime", "algorithm", "accounts", "clients"}, "idp")
        if not isinstance(data.get("id"), str) or not data["id"]:
            raise ConfigError("invalid-config", "idp.id must be a non-empty string")
        default = IdpSpec.default(data["id"])
        cfg = cls(data["id"], data.get("issuer", default.issuer), data.get("token_lifetime", 3600),
                  data.get("algorithm", "RS256"), list(data.get("accounts", [])), list(data.get("clients", [])))
        try:
            check_lifetime(cfg.token_lifetime)
        except SoapError as exc:
            raise ConfigError("invalid-config", f"idp {cfg.id}: {exc.detail}") from exc
        if cfg.algorithm not in SIGNATURE_ALGORITHMS:
            raise ConfigError("invalid-config", f"idp {cfg.id}: unsupported algorithm {cfg.algorithm!r}")
        for acct in cfg.accounts:
            _reject_unknown(acct, {"username", "password", "email"}, f"idp {cfg.id} account")
        return cfg


@dataclass
class DemoConfig:
    delay: int = 0
    corrupt_signing_key: list[str] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DemoConfig":
        _reject_unknown(data, {"delay", "corrupt_signing_key"}, "demo")
        delay = data.get("delay", 0)
        if not isinstance(delay, int) or delay < 0:
            raise ConfigError("invalid-config", "demo.delay must be a non-negative integer")
        return cls(delay, list(data.get("corrupt_signing_key", [])))


@dataclass
class CliConfig:
    seed: int = 0
    idps: list[IdpConfig] = field(default_factory=lambda: [IdpConfig.from_dict({"id": "idpA"}),
                                                           IdpConfig.from_dict({"id": "idpB"})])
    app_base: str = "https://msg.example"
    hash_profile: str = crypto.DEFAULT_HASH_PROFILE
    skew: int = DEFAULT_SKEW
    out: str | None = None
    demo: DemoConfig = field(default_factory=DemoConfig)

    FIELDS = ("seed", "idps", "app_base", "hash_profile", "skew", "out", "demo")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CliConfig":
        _reject_unknown(data, set(cls.FIELDS), "config")
        cfg = cls()
        if "seed" in data:
            cfg.seed = _seed(data["seed"])
        if "idps" in data:
            cfg.idps = [IdpConfig.from_dict(d) for d in data["idps"]]
            ids = [i.id for i in cfg.idps]
            if not ids or len(set(ids)) != len(ids):
                raise ConfigError("invalid-config", "idps must be a non-empty list with unique ids")
        cfg.app_base = data.get("app_base", cfg.app_base)
        cfg.hash_profile = data.get("hash_profile", cfg.hash_profile)
        if cfg.hash_profile not in HASH_PROFILES:
            raise ConfigError("invalid-config", f"unknown hash profile {cfg.hash_profile!r}")
        cfg.skew = data.get("skew", cfg.skew)
        if not isinstance(cfg.skew, int) or cfg.skew < 0:
            raise ConfigError("invalid-config", "skew must be a non-negative integer")
        cfg.out = data.get("out")
        cfg.demo = DemoConfig.from_dict(data.get("demo", {}))
        unknown_corrupt = set(cfg.demo.corrupt_signing_key) - {i.id for i in cfg.idps}
        if unknown_corrupt:
            raise ConfigError("invalid-config", f"demo.corrupt_signing_key names unknown idp(s) {sorted(unknown_corrupt)}")
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "CliConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError("invalid-config", f"cannot read {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("invalid-config", f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def world_config(self) -> WorldConfig:
        return WorldConfig([IdpSpec(i.id, i.issuer, i.token_lifetime, i.algorithm) for i in self.idps],
                           self.app_base, self.hash_profile, self.skew)


def _seed(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2 ** 64:
        raise ConfigError("invalid-config", "seed must be an unsigned 64-bit integer")
    return value


# -- output helpers ----------------------------------------------------------------


def _emit(args: argparse.Namespace, document: dict[str, Any], text_lines: list[str]) -> None:
    if args.format == "json":
        print(json.dumps({"schema": REPORT_SCHEMA, **document}, indent=2, sort_keys=True, default=str))
    else:
        print("\n".join(text_lines))


# -- demo ----------------------------------------------------------------------------


def corrupt_signing_key(world: World, idp_id: str) -> None:
    """Make the IdP sign with a private key that does not match its published JWKS entry."""
    idp = world.idp(idp_id)
    entry = idp._keys[-1]
    rogue = crypto.generate_signing_key(idp.algorithm, source=world.source.fork(f"corrupt/{idp_id}"))
    entry.key = SigningKeyPair(entry.key.key_id, entry.key.algorithm, rogue.private, entry.key.public)


def run_demo(cfg: CliConfig) -> dict[str, Any]:
    """Bob proves each configured IdP account to Alice; Alice verifies every attestation."""
    world = World(cfg.world_config(), seed=cfg.seed)
    world.add_agent("alice")
    world.add_agent("bob")
    for idp_id in cfg.demo.corrupt_signing_key:
        corrupt_signing_key(world, idp_id)
    sn = world.safety_number_between("bob", "alice")
    runs: dict[str, dict[str, Any]] = {}
    for spec in cfg.idps:
        world.tick()
        try:
            url = world.start_soap("bob", spec.id, sn)
            world.browse("bob", url)
            runs[spec.id] = {"idp": spec.id, "stage": "prover", "ok": True}
        except SoapError as exc:
            runs[spec.id] = {"idp": spec.id, "stage": "prover", "ok": False, "error": exc.code,
                             "detail": exc.detail}
    if cfg.demo.delay:
        world.tick(cfg.demo.delay)
    for spec in cfg.idps:
        if not runs[spec.id]["ok"]:
            continue
        world.tick()
        world.send("bob", "alice", world.agent("bob").attestations[spec.id].to_json())
        report = world.verify("alice", "bob")
        entry = runs[spec.id]
        entry["stage"] = "verifier"
        entry.update({k: v for k, v in report.to_dict().items() if k in ("ok", "error", "checks", "identity")})
    verdicts = [check_sender_correspondence(world.trace)]
    verdicts += [check_privacy_leakage(world.trace, spec.id) for spec in cfg.idps]
    failures = [f"{r['error']} at {r['idp']}" for r in runs.values() if not r["ok"]]
    failures += [f"{v.property} violated" for v in verdicts if not v.holds]
    return {
        "command": "demo",
        "seed": cfg.seed,
        "safety_number": sn.hex,
        "runs": list(runs.values()),
        "verdicts": [v.to_dict() for v in verdicts],
        "ok": not failures,
        "first_failure": failures[0] if failures else None,
        "_world": world,
    }


def cmd_demo(args: argparse.Namespace, cfg: CliConfig) -> int:
    started = time.perf_counter()
    result = run_demo(cfg)
    world: World = result.pop("_world")
    result["elapsed_s"] = round(time.perf_counter() - started, 4)
    if args.out:
        result["files"] = write_report(args.out, "demo", result, world.trace)
    lines = [f"safety number  {result['safety_number']}"]
    for r in result["runs"]:
        if r["ok"]:
            ident = r["identity"]
            lines.append(f"{r['idp']:<8} verified  {ident['email']}  sub={ident['subject']}  iss={ident['issuer']}")
        else:
            lines.append(f"{r['idp']:<8} FAILED    {r['error']} ({r['stage']})")
    for v in result["verdicts"]:
        lines.append(f"{v['property']:<24} {'holds' if v['holds'] else 'VIOLATED'}")
    lines.append("result: ok" if result["ok"] else f"result: FAIL ({result['first_failure']})")
    _emit(args, result, lines)
    return EXIT_OK if result["ok"] else EXIT_FAIL


# -- scenario ------------------------------------------------------------------------


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("soapauth") / "scenarios"
    return {Path(str(p)).stem: Path(str(p)) for p in root.iterdir() if str(p).endswith(".json")}


def _resolve_scenario(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = bundled_scenarios()
    stem = path.name.removesuffix(".json").removesuffix(".scenario")
    if stem in bundled:
        return bundled[stem]
    raise ConfigError("scenario-error", f"no such scenario file or bundled scenario: {name}")


def cmd_scenario(args: argparse.Namespace, cfg: CliConfig) -> int:
    if args.list:
        for name, path in sorted(bundled_scenarios().items()):
            print(f"{name:<24} {path}")
        return EXIT_OK
    if not args.path:
        raise ConfigError("usage", "scenario: give a path, a bundled name, or --list")
    path = _resolve_scenario(args.path)
    try:
        scenario = Scenario.load(path)
    except json.JSONDecodeError as exc:
        raise ConfigError("parse-error", f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if args.seed is not None:
        scenario.seed = args.seed
    outcomes = execute(scenario)
    lines, docs = [], []
    for outcome in outcomes:
        label = scenario.name + (f"[{outcome.run.variant}]" if outcome.run.variant else "")
        doc = {"command": "scenario", "scenario": scenario.name, "path": str(path), "seed": scenario.seed,
               **outcome.to_dict()}
        if args.out:
            stem = scenario.name + (f".{outcome.run.variant}" if outcome.run.variant else "")
            highlight = [e for v in outcome.verdicts if v.witness for e in v.witness]
            doc["files"] = write_report(args.out, stem, doc, outcome.run.trace, highlight=highlight)
        docs.append(doc)
        lines.append(f"{label}: {'PASS' if outcome.passed else 'FAIL'}")
        for r in outcome.results:
            where = f"{path}:{r.line}" if r.line else str(path)
            mark = "ok  " if r.met else "FAIL"
            lines.append(f"  {mark} {where}  {json.dumps(r.expectation, sort_keys=True)}  ({r.detail})")
    passed = all(o.passed for o in outcomes)
    _emit(args, {"command": "scenario", "passed": passed, "runs": docs}, lines)
    return EXIT_OK if passed else EXIT_FAIL


# -- verify ----------------------------------------------------------------------------


def cmd_verify(args: argparse.Namespace, cfg: CliConfig) -> int:
    try:
        payload = Path(args.attestation).read_text().strip()
        registry = IdpRegistry.from_dict(json.loads(Path(args.registry).read_text()))
        cache = ReplayCache()
        if args.cache:
            cache = ReplayCache.from_dict(json.loads(Path(args.cache).read_text()))
    except OSError as exc:
        raise ConfigError("usage", f"cannot read input: {exc}") from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError("parse-error", f"bad registry or cache file: {exc}") from exc
    sn = SafetyNumber.from_hex(args.safety_number)
    now = args.now if args.now is not None else int(time.time())
    report = check_attestation(payload, sn, cache, registry, now, cfg.skew, cfg.hash_profile)
    doc = {"command": "verify", **report.to_dict()}
    lines = [f"{name:<16} {'pass' if ok else 'FAIL'}" for name, ok in report.checks]
    if report.ok:
        ident = report.identity
        lines.append(f"verified {ident.email} (sub={ident.subject}) via {ident.idp_id}")
    else:
        lines.append(f"rejected: {report.error} {report.detail}".rstrip())
    _emit(args, doc, lines)
    return EXIT_OK if report.ok else EXIT_FAIL


# -- serve-idp --------------------------------------------------------------------------


def cmd_serve_idp(args: argparse.Namespace, cfg: CliConfig) -> int:
    from .httpd import IdpHTTPServer

    spec = next((i for i in cfg.idps if i.id == args.idp), None) if args.idp else cfg.idps[0]
    if spec is None:
        raise ConfigError("usage", f"no idp {args.idp!r} in config")
    try:
        server = IdpHTTPServer(port=args.port, idp_id=spec.id, source=RandomSource(cfg.seed),
                               token_lifetime=spec.token_lifetime, algorithm=spec.algorithm, skew=cfg.skew)
    except OSError as exc:
        print(f"serve-idp: cannot bind port {args.port}: {exc.strerror}", file=sys.stderr)
        return EXIT_FAIL
    idp = server.idp
    accounts = spec.accounts or [{"username": "alice", "password": "alice-password"}]
    for acct in accounts:
        idp.add_account(acct["username"], acct["password"], acct.get("email", f"{acct['username']}@localhost"))
    clients = [idp.register_client(urls) for urls in (spec.clients or [["http://127.0.0.1/cb"]])]
    info = {"issuer": idp.issuer, "discovery": f"{idp.issuer}/.well-known/openid-configuration",
            "clients": {c: list(idp.clients[c]) for c in clients}, "accounts": [a["username"] for a in accounts]}
    print(json.dumps(info, sort_keys=True), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides config)")
    common.add_argument("--out", help="directory for reports, traces and timeline figures")
    common.add_argument("--format", choices=("json", "text"), default="text")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="soapauth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("demo", parents=[common], help="two-IdP end-to-end run with property checks")

    p = sub.add_parser("scenario", parents=[common], help="run a scenario file and check its expectations")
    p.add_argument("path", nargs="?", help="scenario file or bundled scenario name")
    p.add_argument("--list", action="store_true", help="list bundled scenarios")

    p = sub.add_parser("verify", parents=[common], help="verify an attestation against a safety number")
    p.add_argument("attestation", help="file holding attestation JSON")
    p.add_argument("--safety-number", required=True, help="hex safety number of the channel")
    p.add_argument("--registry", required=True, help="trusted-issuer registry JSON")
    p.add_argument("--cache", help="own replay cache JSON")
    p.add_argument("--now", type=int, help="verification time (unix seconds)")

    p = sub.add_parser("serve-idp", parents=[common], help="serve the mock IdP on loopback")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--idp", help="which configured idp to serve (default: first)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"demo": cmd_demo, "scenario": cmd_scenario, "verify": cmd_verify, "serve-idp": cmd_serve_idp}
    try:
        cfg = CliConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = _seed(args.seed)
        if args.out is None:
            args.out = cfg.out
        return handlers[args.command](args, cfg)
    except (ConfigError, ScenarioError) as exc:
        print(f"soapauth {args.command}: {exc.code}: {exc.detail}", file=sys.stderr)
        return EXIT_USAGE
    except SoapError as exc:
        print(f"soapauth {args.command}: {exc.code}: {exc.detail}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
