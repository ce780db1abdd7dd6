"""Scenario runner: a whole multi-domain deployment hosted in one process.

A scenario file declares domains, gates, circuits and a workload. ``load``
parses and cross-validates it without side effects; ``run`` stands the
deployment up over in-process pipes or localhost TCP, drives the workload in
order, and returns a :class:`RunReport`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional

import jsonschema

from ioda.circuit import CircuitSpec, activate, verify
from ioda.core_model import (
    DataRecord,
    GateAddress,
    Principal,
    canonical_batch,
    canonical_json,
    format_address,
    parse_address,
)
from ioda.dataflow import Filter, Join, operator_from_json
from ioda.errors import (
    AccessDenied,
    ActivationFailed,
    IodaError,
    ParseError,
    ValidationError,
)
from ioda.gate import Gate, GateSpec, create_gate
from ioda.governance import FederatedLedger, ProvenanceLedger, audit, rule_from_json, trace
from ioda.resolution import DomainRegistry, PeeringTable, Selector, resolve_cross
from ioda.store import StoreConfig
from ioda.wire import GateKeys, GateServer, RemoteRegistry, WireClient, make_network

log = logging.getLogger(__name__)

TRANSPORTS = ("inproc", "tcp")


def scenario_schema() -> dict:
    return json.loads(resources.files("ioda").joinpath("scenario.schema.json").read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainConfig:
    name: str
    peers: tuple = ()
    border: Optional[str] = None  # gate name serving this domain's registry to peers


@dataclass(frozen=True)
class Step:
    index: int
    at: int
    action: str
    args: Mapping[str, Any]


@dataclass
class ScenarioConfig:
    name: str
    domains: list
    gates: list  # GateSpec
    circuits: list = field(default_factory=list)  # CircuitSpec
    workload: list = field(default_factory=list)  # Step
    principals: dict = field(default_factory=dict)  # name -> roles
    rules: list = field(default_factory=list)
    seed: str = "ioda"
    key_seed: Optional[str] = None
    mismatch: frozenset = frozenset()  # gate addresses registered with the wrong key
    description: str = ""
    base_dir: Optional[Path] = None

    def domain(self, name: str) -> DomainConfig:
        return next(d for d in self.domains if d.name == name)

    def gate_spec(self, address: str) -> GateSpec:
        return next(g for g in self.gates if format_address(g.address) == address)

    def circuit(self, name: str) -> CircuitSpec:
        for c in self.circuits:
            if c.name == name:
                return c
        raise ValidationError(f"no circuit named {name!r}")

    def border(self, domain: str) -> GateAddress:
        d = self.domain(domain)
        if d.border is not None:
            return GateAddress(domain, d.border)
        names = sorted(g.address.gate for g in self.gates if g.address.domain == domain)
        return GateAddress(domain, names[0])


def _field_path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def load(path) -> ScenarioConfig:
    """Parse, schema-check and cross-validate a scenario file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"{path}: cannot read: {e.strerror or e}") from None
    return loads(text, source=str(path), base_dir=path.parent)


def loads(text: str, source: str = "<string>", base_dir: Optional[Path] = None) -> ScenarioConfig:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from None
    return from_json(obj, base_dir=base_dir)


def from_json(obj: Any, base_dir: Optional[Path] = None) -> ScenarioConfig:
    validator = jsonschema.Draft202012Validator(scenario_schema())
    errors = sorted(validator.iter_errors(obj), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ValidationError(f"{_field_path(err)}: {err.message}")
    try:
        gates = [GateSpec.from_json(g) for g in obj.get("gates", [])]
        circuits = [CircuitSpec.from_json(c) for c in obj.get("circuits", [])]
        rules = [rule_from_json(r) for r in obj.get("governance", [])]
    except IodaError as e:
        raise ValidationError(str(e)) from None
    identities = obj.get("identities", {})
    steps, prev = [], 0
    for i, raw in enumerate(obj.get("workload", [])):
        at = raw.get("at", prev)
        if at < prev:
            raise ValidationError(f"workload/{i}/at: {at} is earlier than the previous step ({prev})")
        prev = at
        args = {k: v for k, v in raw.items() if k not in ("at", "action")}
        steps.append(Step(i, at, raw["action"], args))
    config = ScenarioConfig(
        name=obj["name"],
        description=obj.get("description", ""),
        domains=[DomainConfig(d["name"], tuple(d.get("peers", ())), d.get("border")) for d in obj["domains"]],
        gates=gates,
        circuits=circuits,
        workload=steps,
        principals={k: frozenset(v) for k, v in obj.get("principals", {}).items()},
        rules=rules,
        seed=obj.get("seed", obj["name"]),
        key_seed=identities.get("seed"),
        mismatch=frozenset(identities.get("mismatch", ())),
        base_dir=base_dir,
    )
    cross_validate(config)
    return config


def cross_validate(config: ScenarioConfig) -> None:
    """Every name the scenario mentions must be declared somewhere."""

    def fail(where: str, msg: str):
        raise ValidationError(f"{where}: {msg}")

    if not config.domains:
        fail("domains", "at least one domain is required")
    domains = [d.name for d in config.domains]
    if len(set(domains)) != len(domains):
        fail("domains", f"duplicate domain names {sorted(domains)}")
    gates = {}
    for i, g in enumerate(config.gates):
        addr = format_address(g.address)
        if addr in gates:
            fail(f"gates/{i}/address", f"duplicate gate {addr}")
        if g.address.domain not in domains:
            fail(f"gates/{i}/address", f"gate {addr} is in undefined domain {g.address.domain!r}")
        gates[addr] = g
    for i, d in enumerate(config.domains):
        for p in d.peers:
            if p not in domains:
                fail(f"domains/{i}/peers", f"undefined peer domain {p!r}")
            if p == d.name:
                fail(f"domains/{i}/peers", f"domain {p} cannot peer with itself")
            if not any(g.address.domain == p for g in config.gates):
                fail(f"domains/{i}/peers", f"peer domain {p} has no gate to serve its registry")
        if d.border is not None and f"{d.name}/{d.border}" not in gates:
            fail(f"domains/{i}/border", f"undefined gate {d.name}/{d.border}")
        if d.peers and not any(g.address.domain == d.name for g in config.gates):
            fail(f"domains/{i}", f"domain {d.name} has peers but no gate to serve its registry")

    def need_oport(where: str, text: str):
        addr = parse_address(text) if isinstance(text, str) else text
        gate = gates.get(format_address(addr.gate_address))
        if gate is None:
            fail(where, f"undefined gate {format_address(addr.gate_address)}")
        if addr.oport not in {p.name for p in gate.oports}:
            fail(where, f"undefined oport {format_address(addr)}")
        return addr

    def need_gate(where: str, text: str) -> GateSpec:
        if text not in gates:
            fail(where, f"undefined gate {text}")
        return gates[text]

    for gi, g in enumerate(config.gates):
        inames = {p.name for p in g.iports}
        for pi, p in enumerate(g.iports):
            if isinstance(p.source, GateAddress):
                need_oport(f"gates/{gi}/iports/{pi}/source", p.source)
            for si, op in enumerate(p.dataflow.stages):
                if isinstance(op, Join) and op.right != "store":
                    name = op.right[len("iport/") :] if op.right.startswith("iport/") else None
                    if name not in inames:
                        fail(f"gates/{gi}/iports/{pi}/dataflow/{si}/right", f"undefined join source {op.right!r}")
        for oi, o in enumerate(g.oports):
            for si, op in enumerate(o.view_dataflow.stages):
                if isinstance(op, Join) and op.right != "store":
                    name = op.right[len("iport/") :] if op.right.startswith("iport/") else None
                    if name not in inames:
                        fail(f"gates/{gi}/oports/{oi}/view/{si}/right", f"undefined join source {op.right!r}")
    names = set()
    for ci, c in enumerate(config.circuits):
        if c.name in names:
            fail(f"circuits/{ci}/name", f"duplicate circuit {c.name!r}")
        names.add(c.name)
        for ei, e in enumerate(c.edges):
            need_oport(f"circuits/{ci}/edges/{ei}/from", e.source)
            target = need_gate(f"circuits/{ci}/edges/{ei}/to", format_address(e.target))
            if e.iport not in {p.name for p in target.iports}:
                fail(f"circuits/{ci}/edges/{ei}/iport", f"undefined iport {format_address(e.target)}/{e.iport}")
    for i, m in enumerate(sorted(config.mismatch)):
        need_gate(f"identities/mismatch/{i}", m)
    for i, rule in enumerate(config.rules):
        if hasattr(rule, "oport"):
            need_oport(f"governance/{i}/oport", rule.oport)
    for s in config.workload:
        where = f"workload/{s.index}"
        a = s.args
        if s.action == "ingest":
            g = need_gate(f"{where}/gate", a["gate"])
            if a["iport"] not in {p.name for p in g.iports}:
                fail(f"{where}/iport", f"undefined iport {a['gate']}/{a['iport']}")
        elif s.action in ("expect", "trace"):
            need_oport(f"{where}/oport", a["oport"])
        elif s.action == "query":
            need_oport(f"{where}/oport", a["oport"])
            if a["as"] not in config.principals:
                fail(f"{where}/as", f"undefined principal {a['as']!r}")
            if "via" in a:
                need_gate(f"{where}/via", a["via"])
        elif s.action == "resolve":
            need_gate(f"{where}/from", a["from"])
        elif s.action in ("fault", "repair"):
            if a["circuit"] not in names:
                fail(f"{where}/circuit", f"undefined circuit {a['circuit']!r}")
            if s.action == "fault" and a["edge"] not in {e.key for e in config.circuit(a["circuit"]).edges}:
                fail(f"{where}/edge", f"circuit {a['circuit']} has no edge {a['edge']!r}")


# ---------------------------------------------------------------------------
# Deployment
# ---------------------------------------------------------------------------


class Deployment:
    """Registries, ledgers, keys, gates and servers for one scenario.

    Construction only builds registries (enough for ``verify``); ``start``
    brings gates and wire servers up.
    """

    def __init__(self, config: ScenarioConfig, transport: str = "inproc"):
        if transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {transport!r}")
        self.config = config
        self.transport = transport
        self.specs = {format_address(g.address): g for g in config.gates}
        key_seed = config.key_seed if config.key_seed is not None else config.seed
        self.keys = {a: GateKeys.from_seed(a, key_seed) for a in self.specs}
        self.registries = {d.name: DomainRegistry(d.name) for d in config.domains}
        for addr, spec in self.specs.items():
            vk = self.keys[addr].verify_key
            if addr in config.mismatch:
                # what the registry believes differs from what the gate holds
                vk = GateKeys.from_seed(addr, key_seed + "/tampered").verify_key
            self.registries[spec.address.domain].register(spec.metadata, vk)
        self.ledgers = {d.name: ProvenanceLedger(d.name) for d in config.domains}
        self.ledger = FederatedLedger([self.ledgers[d] for d in sorted(self.ledgers)])
        self.gates: dict = {}
        self.servers: dict = {}
        self.peering: dict = {}
        self.network = None
        self._tmp: Optional[str] = None

    def identity(self, address: GateAddress) -> Optional[bytes]:
        reg = self.registries.get(address.domain)
        return reg.verify_key(address.gate_address) if reg is not None else None

    def _store_config(self, spec: GateSpec) -> GateSpec:
        if spec.store.backend != "file":
            return spec
        if self._tmp is None:
            self._tmp = tempfile.mkdtemp(prefix="ioda-")
        # every run gets a fresh directory so reruns start from empty stores
        rel = spec.store.path or f"{spec.address.domain}.{spec.address.gate}.log"
        path = Path(self._tmp) / Path(rel).name
        return GateSpec(spec.address, spec.metadata, spec.iports, spec.oports, StoreConfig("file", str(path)), spec.roles)

    def start(self) -> "Deployment":
        self.network = make_network(self.transport)
        for addr in sorted(self.specs):
            spec = self.specs[addr]
            gate = create_gate(self._store_config(spec), self.ledgers[spec.address.domain])
            self.gates[addr] = gate
            server = GateServer(gate, self.keys[addr], self.identity, registry=self.registries[spec.address.domain])
            self.servers[addr] = server
            self.network.add(server)
        for d in self.config.domains:
            table = PeeringTable(d.name)
            if d.peers:
                local = self.config.border(d.name)
                for p in d.peers:
                    remote = self.config.border(p)
                    table.add(p, RemoteRegistry(lambda l=local, r=remote: self.open_client(l, r)))
            self.peering[d.name] = table
        return self

    def open_client(self, local: GateAddress, remote: GateAddress) -> WireClient:
        local, remote = local.gate_address, remote.gate_address
        transport = self.network.connect(remote)
        return WireClient.connect(self.keys[format_address(local)], transport, remote, self.identity)

    def gate(self, address) -> Gate:
        addr = parse_address(address) if isinstance(address, str) else address
        return self.gates[format_address(addr.gate_address)]

    def resolve(self, from_gate: str, sel: Selector) -> GateAddress:
        spec = self.specs[from_gate]
        d = spec.address.domain
        return resolve_cross(self.registries[d], self.peering[d], spec.metadata, sel)

    def digests(self) -> dict:
        out = {}
        for addr in sorted(self.gates):
            gate = self.gates[addr]
            for oport in sorted(p.name for p in gate.spec.oports):
                view = gate.materialize(oport)
                out[f"{addr}/{oport}"] = hashlib.sha256(canonical_batch(view.records).encode()).hexdigest()
        return out

    def close(self) -> None:
        if self.network is not None:
            self.network.close()
        for gate in self.gates.values():
            gate.close()
        if self._tmp is not None:
            shutil.rmtree(self._tmp, ignore_errors=True)
            self._tmp = None


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass
class StepOutcome:
    index: int
    at: int
    action: str
    ok: bool
    detail: dict = field(default_factory=dict)
    error: Optional[dict] = None

    def to_json(self) -> dict:
        out = {"index": self.index, "at": self.at, "action": self.action, "ok": self.ok, "detail": self.detail}
        if self.error is not None:
            out["error"] = self.error
        return out


@dataclass
class RunReport:
    scenario: str
    transport: str
    steps: list = field(default_factory=list)
    circuits: dict = field(default_factory=dict)
    digests: dict = field(default_factory=dict)
    views: dict = field(default_factory=dict)  # oport -> record ids
    events: dict = field(default_factory=dict)  # oport -> event count
    audit: Optional[dict] = None
    sources: list = field(default_factory=list)  # ids of every workload-ingested record

    @property
    def passed(self) -> bool:
        if not all(s.ok for s in self.steps):
            return False
        return all(c["verification"]["passed"] and c.get("activated", False) for c in self.circuits.values())

    def failures(self) -> list:
        out = [f"step {s.index} ({s.action})" for s in self.steps if not s.ok]
        for name, c in sorted(self.circuits.items()):
            if not c["verification"]["passed"]:
                failed = [k["check"] for k in c["verification"]["checks"] if not k["passed"]]
                out.append(f"circuit {name}: failed checks {failed}")
            elif not c.get("activated"):
                out.append(f"circuit {name}: activation failed on {c.get('error', {}).get('edge')}")
        return out

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "transport": self.transport,
            "passed": self.passed,
            "steps": [s.to_json() for s in self.steps],
            "circuits": self.circuits,
            "digests": self.digests,
            "views": self.views,
            "events": self.events,
            "audit": self.audit,
        }

    def to_text(self) -> str:
        lines = [f"scenario {self.scenario} over {self.transport}: {'PASS' if self.passed else 'FAIL'}"]
        for name, c in sorted(self.circuits.items()):
            v = c["verification"]
            state = "active" if c.get("activated") else "inactive"
            lines.append(f"  circuit {name}: verified={v['passed']} {state}")
            if not v["passed"]:
                lines.extend("    " + line for line in _verification_lines(v))
            if c.get("error"):
                lines.append(f"    {c['error']['edge']}: {c['error']['code']}: {c['error']['message']}")
        for s in self.steps:
            mark = "ok  " if s.ok else "FAIL"
            msg = f"  [{mark}] #{s.index} t={s.at} {s.action}"
            if s.error:
                msg += f" {s.error['code']}: {s.error['message']}"
            elif s.detail.get("summary"):
                msg += f" {s.detail['summary']}"
            lines.append(msg)
        for oport, digest in self.digests.items():
            lines.append(f"  {oport} {digest[:16]} ({len(self.views.get(oport, []))} records)")
        if self.audit is not None:
            lines.append(f"  audit: {len(self.audit['violations'])} violation(s)")
        return "\n".join(lines)


def _verification_lines(v: dict) -> list:
    lines = []
    for c in v["checks"]:
        for f in c["failures"]:
            where = f.get("edge") or " -> ".join(f.get("cycle", []))
            lines.append(f"{c['check']}: {where}: {f['message']}")
    return lines


def _error(e: BaseException, **extra) -> dict:
    code = getattr(e, "code", type(e).__name__)
    return {"code": code, "message": str(e), **extra}


def _payloads(records) -> list:
    return [json.loads(canonical_json(r.payload)) for r in records]


def _same(actual: list, expected: list) -> bool:
    return [canonical_json(p) for p in actual] == [canonical_json(p) for p in expected]


class Runner:
    """Drives one scenario's workload against a started deployment."""

    def __init__(self, config: ScenarioConfig, deployment: Deployment):
        self.config = config
        self.dep = deployment
        self.running: dict = {}
        self.report = RunReport(config.name, deployment.transport)

    def activate_all(self) -> None:
        for spec in self.config.circuits:
            ver = verify(spec, self.dep.registries, self.dep.specs)
            entry: dict = {"verification": ver.to_json(), "activated": False}
            self.report.circuits[spec.name] = entry
            if not ver.passed:
                log.info("circuit %s failed verification: %s", spec.name, ver.failed_checks())
                continue
            try:
                self.running[spec.name] = activate(
                    spec,
                    registries=self.dep.registries,
                    gate_specs=self.dep.specs,
                    gates=self.dep.gates,
                    open_client=self.dep.open_client,
                )
                entry["activated"] = True
                entry["order"] = self.running[spec.name].order
            except ActivationFailed as e:
                cause = e.cause if isinstance(e.cause, BaseException) else e
                entry["error"] = _error(cause, edge=e.edge)
                log.warning("circuit %s: %s", spec.name, e)

    def settle(self) -> int:
        """Pump every running circuit until nothing moves."""
        total = 0
        for _ in range(64):
            moved = sum(self.running[n].settle() for n in sorted(self.running))
            total += moved
            if not moved:
                break
        return total

    def run_step(self, step: Step) -> StepOutcome:
        handler = getattr(self, f"_do_{step.action}")
        out = StepOutcome(step.index, step.at, step.action, True)
        try:
            handler(step, out)
        except IodaError as e:
            out.ok = False
            out.error = _error(e)
        return out

    def _do_ingest(self, step: Step, out: StepOutcome) -> None:
        records = []
        for i, payload in enumerate(step.args["records"]):
            rid = hashlib.sha256(f"{self.config.seed}:{step.index}:{i}".encode()).hexdigest()[:32]
            records.append(DataRecord(rid, step.at * 1000 + i, payload))
        rep = self.dep.gate(step.args["gate"]).ingest(step.args["iport"], records)
        self.report.sources.extend(r.id for r in records)
        moved = self.settle()
        out.detail = {"accepted": len(records), "stored": rep.derived, "propagated": moved}
        out.detail["summary"] = f"{len(records)} in, {rep.derived} stored, {moved} propagated"

    def _do_expect(self, step: Step, out: StepOutcome) -> None:
        view = self.dep.gate(step.args["oport"]).materialize(parse_address(step.args["oport"]).oport)
        actual = _payloads(view.records)
        out.detail = {"count": len(actual)}
        if "count" in step.args and len(actual) != step.args["count"]:
            out.ok = False
            out.detail["expected_count"] = step.args["count"]
        if "payloads" in step.args and not _same(actual, step.args["payloads"]):
            out.ok = False
            out.detail["expected"] = step.args["payloads"]
            out.detail["actual"] = actual
        out.detail["summary"] = f"{step.args['oport']} has {len(actual)} record(s)"

    def _do_fault(self, step: Step, out: StepOutcome) -> None:
        circuit = self.running.get(step.args["circuit"])
        if circuit is None:
            raise ActivationFailed(step.args["edge"], f"circuit {step.args['circuit']} is not running")
        circuit.inject_fault(step.args["edge"])
        out.detail = {"degraded": sorted(circuit.status().degraded())}
        out.detail["summary"] = f"degraded {out.detail['degraded']}"

    def _do_repair(self, step: Step, out: StepOutcome) -> None:
        circuit = self.running.get(step.args["circuit"])
        if circuit is None:
            raise ActivationFailed(None, f"circuit {step.args['circuit']} is not running")
        fixed = circuit.repair()
        moved = self.settle()
        out.detail = {"repaired": fixed, "propagated": moved, "degraded": sorted(circuit.status().degraded())}
        out.ok = not out.detail["degraded"]
        out.detail["summary"] = f"repaired {fixed}, {moved} propagated"

    def _do_query(self, step: Step, out: StepOutcome) -> None:
        a = step.args
        addr = parse_address(a["oport"])
        principal = Principal(a["as"], self.config.principals[a["as"]])
        flt = operator_from_json(a["filter"]) if a.get("filter") else None
        if flt is not None and not isinstance(flt, Filter):
            raise ValidationError("query filter must be a filter stage")
        want = a.get("expect", "allow")
        try:
            if "via" in a:
                client = self.dep.open_client(parse_address(a["via"]), addr.gate_address)
                try:
                    records = client.query(addr.oport, principal, flt)
                finally:
                    client.close()
            else:
                records = self.dep.gate(addr).query(addr.oport, principal, flt)
        except AccessDenied as e:
            out.ok = want == "deny"
            out.detail = {"outcome": "deny", "summary": f"denied: {e}"}
            return
        actual = _payloads(records)
        out.detail = {"outcome": "allow", "count": len(actual), "summary": f"{len(actual)} record(s)"}
        if want != "allow":
            out.ok = False
        if "payloads" in a and not _same(actual, a["payloads"]):
            out.ok = False
            out.detail["expected"] = a["payloads"]
            out.detail["actual"] = actual

    def _do_resolve(self, step: Step, out: StepOutcome) -> None:
        sel = Selector.from_json(step.args["selector"])
        want = step.args.get("expect")
        try:
            got = format_address(self.dep.resolve(step.args["from"], sel))
        except IodaError as e:
            if want is not None and want == e.code:
                out.detail = {"error": e.code, "summary": f"{e.code} as expected"}
                return
            raise
        out.detail = {"address": got, "summary": got}
        if want is not None and want != got:
            out.ok = False
            out.detail["expected"] = want

    def _do_trace(self, step: Step, out: StepOutcome) -> None:
        addr = parse_address(step.args["oport"])
        view = self.dep.gate(addr).materialize(addr.oport)
        idx = step.args.get("index", 0)
        if not -len(view.records) <= idx < len(view.records):
            out.ok = False
            out.detail = {"summary": f"view has no record #{idx}"}
            return
        rid = view.records[idx].id
        dag = trace(self.dep.ledger, rid)
        leaves = sorted(dag.leaves())
        sources = set(self.report.sources)
        out.detail = {"record": rid, "leaves": leaves, "nodes": len(dag.nodes)}
        out.detail["summary"] = f"{rid[:12]} <- {len(leaves)} source(s)"
        if not set(leaves) <= sources:
            out.ok = False
            out.detail["foreign_leaves"] = sorted(set(leaves) - sources)
        if "expect_sources" in step.args and len(leaves) != step.args["expect_sources"]:
            out.ok = False
            out.detail["expected_sources"] = step.args["expect_sources"]

    def _do_audit(self, step: Step, out: StepOutcome) -> None:
        rep = audit(self.config.rules, self.config.gates, self.dep.ledger)
        n = len(rep.violations)
        out.detail = {"violations": [v.to_json() for v in rep.violations], "summary": f"{n} violation(s)"}
        if n != step.args.get("expect_violations", 0):
            out.ok = False

    def finish(self) -> RunReport:
        rep = self.report
        rep.digests = self.dep.digests()
        for addr, gate in sorted(self.dep.gates.items()):
            for oport in sorted(p.name for p in gate.spec.oports):
                rep.views[f"{addr}/{oport}"] = [r.id for r in gate.materialize(oport).records]
                rep.events[f"{addr}/{oport}"] = len(gate.events(oport))
        for name, circuit in sorted(self.running.items()):
            rep.circuits[name]["status"] = circuit.status().to_json()
        if self.config.rules:
            rep.audit = audit(self.config.rules, self.config.gates, self.dep.ledger).to_json()
        return rep

    def close(self) -> None:
        for c in self.running.values():
            c.close()
        self.running.clear()


def run(config: ScenarioConfig, transport: str = "inproc", *, keep: Optional[list] = None) -> RunReport:
    """Stand the scenario up, drive its workload, tear it down.

    Pass a list as ``keep`` to receive the live deployment instead of having
    it torn down (the caller must then close it).
    """
    dep = Deployment(config, transport).start()
    runner = Runner(config, dep)
    try:
        runner.activate_all()
        runner.settle()
        for step in config.workload:
            outcome = runner.run_step(step)
            log.info("step %d %s ok=%s", step.index, step.action, outcome.ok)
            runner.report.steps.append(outcome)
        return runner.finish()
    finally:
        if keep is not None:
            keep.append((dep, runner))
        else:
            runner.close()
            dep.close()
