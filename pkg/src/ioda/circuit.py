"""Circuits: named gate topologies that are verified, then activated edge by edge.

An edge runs a subscription from the source oport and feeds each complete
epoch of view events into the destination iport as one batch. Propagation
is driven by :meth:`RunningCircuit.settle`, which visits gates in
topological order so that every upstream view is final before its
downstream edges are drained.
"""

from __future__ import annotations

import graphlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional

from ioda.core_model import GateAddress, Schema, format_address, parse_address
from ioda.dataflow import Filter, Join, Project, Sort, Window, scalar_kind
from ioda.errors import ActivationFailed, InvalidSpec, IodaError, SessionClosed, TransportClosed
from ioda.governance import check
from ioda.resolution import Selector, matches

log = logging.getLogger(__name__)

CHECKS = ("resolvable", "acyclic", "schema", "export", "permission")

NUMERIC_TYPES = {"int", "float", "timestamp"}
SCALAR_TYPES = {"string", "int", "float", "bool", "timestamp"}


@dataclass(frozen=True, order=True)
class Edge:
    source: GateAddress  # domain/gate/oport
    target: GateAddress  # domain/gate
    iport: str

    def __post_init__(self):
        if self.source.oport is None:
            raise InvalidSpec(f"edge source {format_address(self.source)} must name an oport")
        if self.target.oport is not None:
            raise InvalidSpec(f"edge target {format_address(self.target)} must be a gate address")

    @property
    def key(self) -> str:
        return f"{format_address(self.source)}->{format_address(self.target)}#{self.iport}"

    @property
    def cross_domain(self) -> bool:
        return self.source.domain != self.target.domain

    def to_json(self) -> dict:
        return {"from": format_address(self.source), "to": format_address(self.target), "iport": self.iport}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Edge":
        return cls(parse_address(obj["from"]), parse_address(obj["to"]), obj["iport"])


@dataclass(frozen=True)
class CircuitSpec:
    name: str
    edges: tuple = ()

    def __post_init__(self):
        edges = tuple(self.edges)
        if len(set(edges)) != len(edges):
            raise InvalidSpec(f"circuit {self.name} has duplicate edges")
        object.__setattr__(self, "edges", edges)

    @property
    def domains(self) -> list:
        return sorted({e.source.domain for e in self.edges} | {e.target.domain for e in self.edges})

    @property
    def gates(self) -> list:
        names = {format_address(e.source.gate_address) for e in self.edges}
        names |= {format_address(e.target) for e in self.edges}
        return sorted(names)

    def to_json(self) -> dict:
        return {"name": self.name, "edges": [e.to_json() for e in self.edges]}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "CircuitSpec":
        return cls(obj["name"], tuple(Edge.from_json(e) for e in obj.get("edges", [])))


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    failures: list = field(default_factory=list)  # dicts with "edge" and/or "cycle", plus "message"

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_json(self) -> dict:
        return {"check": self.name, "passed": self.passed, "failures": self.failures}


@dataclass
class VerificationReport:
    circuit: str
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed_checks(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def failing_edges(self, name: str) -> set:
        return {f["edge"] for f in self.check(name).failures if "edge" in f}

    def to_json(self) -> dict:
        return {"circuit": self.circuit, "passed": self.passed, "checks": [c.to_json() for c in self.checks]}

    def to_text(self) -> str:
        lines = [f"circuit {self.circuit}: {'PASS' if self.passed else 'FAIL'}"]
        for c in self.checks:
            lines.append(f"  [{'ok' if c.passed else 'FAIL'}] {c.name}")
            for f in c.failures:
                where = f.get("edge") or " -> ".join(f.get("cycle", []))
                lines.append(f"      {where}: {f['message']}")
        return "\n".join(lines)


def _literal_type_ok(field_type: str, literal: Any) -> bool:
    kind = scalar_kind(literal)
    if kind == "null":
        return True
    if kind == "number":
        return field_type in NUMERIC_TYPES
    if kind == "string":
        return field_type == "string"
    if kind == "bool":
        return field_type == "bool"
    return False


def consumed_fields(stage) -> list:
    """(path, allowed schema types or None for any, why) consumed by a dataflow's first stage."""
    if isinstance(stage, Filter):
        kind = scalar_kind(stage.value)
        if kind == "null":
            allowed = None
        elif kind == "number":
            allowed = NUMERIC_TYPES
        elif kind == "string":
            allowed = {"string"}
        else:
            allowed = {"bool"}
        return [(stage.path, allowed, f"filter {stage.cmp} {stage.value!r}")]
    if isinstance(stage, Project):
        return [(p, None, "project") for p in stage.paths]
    if isinstance(stage, Sort):
        return [(stage.path, SCALAR_TYPES, "sort key")]
    if isinstance(stage, Join):
        return [(stage.left_path, SCALAR_TYPES, "join key")]
    if isinstance(stage, Window):
        allowed = None if stage.function == "count" else NUMERIC_TYPES
        return [(stage.path, allowed, f"window {stage.function}")]
    return []


def schema_mismatches(schema: Schema, dataflow) -> list:
    """Why the first stage of ``dataflow`` cannot consume records of ``schema``."""
    if not dataflow.stages:
        return []
    problems = []
    for path, allowed, why in consumed_fields(dataflow.stages[0]):
        f = schema.field(path[0])
        if f is None:
            problems.append(f"{why}: field {'.'.join(path)!r} not in source schema")
            continue
        if len(path) > 1:
            if f.type != "map":
                problems.append(f"{why}: {path[0]!r} is {f.type}, cannot address {'.'.join(path)!r}")
            continue
        if allowed is not None and f.type not in allowed:
            problems.append(f"{why}: field {path[0]!r} is {f.type}, needs one of {sorted(allowed)}")
    return problems


def find_cycle(edges: Iterable[Edge]) -> Optional[list]:
    graph: dict = {}
    for e in edges:
        src, dst = format_address(e.source.gate_address), format_address(e.target)
        graph.setdefault(dst, set()).add(src)
        graph.setdefault(src, set())
    try:
        tuple(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as err:
        # graphlib lists each node before the node that depends on it, i.e. in edge
        # direction, closing back on the first; rotate to start at the smallest name
        ring = list(err.args[1][:-1])
        i = ring.index(min(ring))
        ring = ring[i:] + ring[:i]
        return ring + [ring[0]]
    return None


def topo_order(edges: Iterable[Edge], extra: Iterable[str] = ()) -> list:
    """Gates ordered so every edge's source precedes its target; ties broken by name."""
    graph: dict = {g: set() for g in extra}
    for e in edges:
        src, dst = format_address(e.source.gate_address), format_address(e.target)
        graph.setdefault(dst, set()).add(src)
        graph.setdefault(src, set())
    ts = graphlib.TopologicalSorter(graph)
    ts.prepare()
    order = []
    while ts.is_active():
        ready = sorted(ts.get_ready())
        order.extend(ready)
        ts.done(*ready)
    return order


def verify(spec: CircuitSpec, registries: Mapping[str, Any], gates: Mapping[str, Any]) -> VerificationReport:
    """Run every check over the circuit; failures are reported, never raised.

    ``registries`` maps domain -> DomainRegistry. ``gates`` maps canonical gate
    address -> GateSpec, and supplies iport dataflows, oport policies and the
    roles a destination gate consumes under.
    """
    results = {name: CheckResult(name) for name in CHECKS}
    resolvable = []
    for e in spec.edges:
        problems = []
        src_reg = registries.get(e.source.domain)
        src_meta = None
        if src_reg is None:
            problems.append(f"no registry for domain {e.source.domain}")
        else:
            src_meta = src_reg.entries().get(e.source.gate)
            if src_meta is None:
                problems.append(f"{format_address(e.source.gate_address)} is not registered")
            elif e.source.oport not in src_meta.oports:
                problems.append(f"{format_address(e.source.gate_address)} has no oport {e.source.oport!r}")
        dst_reg = registries.get(e.target.domain)
        if dst_reg is None:
            problems.append(f"no registry for domain {e.target.domain}")
        elif e.target.gate not in dst_reg.entries():
            problems.append(f"{format_address(e.target)} is not registered")
        dst_spec = gates.get(format_address(e.target))
        iport = None
        if dst_spec is None:
            problems.append(f"no gate spec for {format_address(e.target)}")
        else:
            iport = next((p for p in dst_spec.iports if p.name == e.iport), None)
            if iport is None:
                problems.append(f"{format_address(e.target)} has no iport {e.iport!r}")
        if not problems and iport is not None and iport.source is not None:
            if isinstance(iport.source, Selector):
                if not matches(src_meta, e.source.oport, iport.source):
                    problems.append(f"source oport does not satisfy iport {e.iport} selector")
            elif iport.source != e.source:
                problems.append(f"iport {e.iport} is bound to {format_address(iport.source)}")
        if problems:
            results["resolvable"].failures.append({"edge": e.key, "message": "; ".join(problems)})
        else:
            resolvable.append((e, src_meta, dst_spec, iport))

    cycle = find_cycle(spec.edges)
    if cycle is not None:
        results["acyclic"].failures.append({"cycle": cycle, "message": "gate-level cycle"})

    for e, src_meta, dst_spec, iport in resolvable:
        port = src_meta.oports[e.source.oport]
        for problem in schema_mismatches(port.schema, iport.dataflow):
            results["schema"].failures.append({"edge": e.key, "message": problem})
        if e.cross_domain and not port.exported:
            results["export"].failures.append(
                {"edge": e.key, "message": f"{format_address(e.source)} is not exported across domains"}
            )
        src_spec = gates.get(format_address(e.source.gate_address))
        if src_spec is None:
            results["permission"].failures.append({"edge": e.key, "message": "source policy unavailable"})
        elif not check(src_spec.policy, dst_spec.principal, e.source.oport, "watch"):
            results["permission"].failures.append(
                {
                    "edge": e.key,
                    "message": f"{format_address(e.target)} (roles {sorted(dst_spec.roles)}) may not watch "
                    f"{format_address(e.source)}",
                }
            )
    return VerificationReport(spec.name, [results[n] for n in CHECKS])


# ---------------------------------------------------------------------------
# Activation
# ---------------------------------------------------------------------------


class EdgeRunner:
    """One wire feeding one iport."""

    def __init__(self, edge: Edge, dest_gate, principal, open_client: Callable[[], Any]):
        self.edge = edge
        self.dest_gate = dest_gate
        self.principal = principal
        self._open_client = open_client
        self.client = None
        self.sub = None
        self.hwm = 0
        self.delivered = 0
        self.reconnects = 0
        self.error: Optional[str] = None

    def open(self) -> None:
        client = self._open_client()
        try:
            sub = client.subscribe(self.edge.source.oport, self.principal, self.hwm)
        except Exception:
            client.close()
            raise
        self.client, self.sub = client, sub

    @property
    def state(self) -> str:
        if self.client is None:
            return "closed"
        if self.client.closed:
            return "degraded"
        return "open"

    def pump(self) -> int:
        """Drain every complete epoch up to the source's current head into the iport."""
        if self.state != "open":
            return 0
        try:
            self.sub.sync()
        except (SessionClosed, TransportClosed) as e:
            log.info("edge %s degraded: %s", self.edge.key, e)
            return 0
        moved = 0
        for batch in self.sub.take_epochs():
            try:
                self.dest_gate.ingest(self.edge.iport, [ev.record for ev in batch])
            except IodaError as e:
                # skip the epoch, keep the edge alive
                self.error = f"{type(e).__name__}: {e}"
                log.warning("edge %s: ingest failed: %s", self.edge.key, self.error)
            self.hwm = batch[-1].seq
            self.sub.ack(self.hwm)
            self.delivered += len(batch)
            moved += len(batch)
        return moved

    def fail(self) -> None:
        if self.client is not None:
            self.client.abort()

    def reconnect(self) -> None:
        if self.client is not None:
            self.client.abort()
        self.client = self.sub = None
        self.open()
        self.reconnects += 1

    def close(self) -> None:
        if self.client is not None:
            self.client.close()
        self.client = self.sub = None


@dataclass
class CircuitStatus:
    circuit: str
    state: str
    gates: dict  # gate -> "live" | "down"
    edges: dict  # edge key -> {"state", "hwm", "delivered"}

    def degraded(self) -> set:
        return {k for k, v in self.edges.items() if v["state"] != "open"}

    def to_json(self) -> dict:
        return {"circuit": self.circuit, "state": self.state, "gates": self.gates, "edges": self.edges}


class RunningCircuit:
    def __init__(self, spec: CircuitSpec, order: list, runners: dict, gates: Mapping[str, Any]):
        self.spec = spec
        self.order = order
        self.runners = runners  # edge -> EdgeRunner, in activation order
        self._gates = gates
        self.state = "RUNNING"
        self._lock = threading.RLock()

    @property
    def activation_order(self) -> list:
        return list(self.runners)

    def _runner(self, edge) -> EdgeRunner:
        if isinstance(edge, str):
            for e, r in self.runners.items():
                if e.key == edge:
                    return r
            raise KeyError(edge)
        return self.runners[edge]

    def settle(self) -> int:
        """Propagate everything currently available, upstream gates first."""
        with self._lock:
            moved = 0
            rank = {g: i for i, g in enumerate(self.order)}
            for edge in sorted(self.runners, key=lambda e: (rank[format_address(e.target)], e.key)):
                moved += self.runners[edge].pump()
            return moved

    def inject_fault(self, edge) -> None:
        with self._lock:
            self._runner(edge).fail()

    def repair(self, edge=None) -> list:
        """Reconnect degraded edges from their high-water marks."""
        with self._lock:
            targets = [self._runner(edge)] if edge is not None else list(self.runners.values())
            fixed = []
            for r in targets:
                if r.state != "open":
                    r.reconnect()
                    fixed.append(r.edge.key)
            return fixed

    def status(self) -> CircuitStatus:
        with self._lock:
            gates = {}
            for g in self.order:
                gate = self._gates.get(g)
                gates[g] = "live" if gate is not None and not gate._closed else "down"
            edges = {
                e.key: {"state": r.state, "hwm": r.hwm, "delivered": r.delivered} for e, r in self.runners.items()
            }
            return CircuitStatus(self.spec.name, self.state, gates, edges)

    def close(self) -> None:
        with self._lock:
            for r in reversed(list(self.runners.values())):
                r.close()
            self.state = "STOPPED"


def activate(
    spec: CircuitSpec,
    *,
    registries: Mapping[str, Any],
    gate_specs: Mapping[str, Any],
    gates: Mapping[str, Any],
    open_client: Callable[[GateAddress, GateAddress], Any],
) -> RunningCircuit:
    """Verify, then open one wire per edge in topological order.

    ``open_client(local_gate, remote_gate)`` returns an authenticated
    :class:`~ioda.wire.WireClient` from ``local_gate`` to ``remote_gate``.
    Any failure closes the wires already opened and raises ActivationFailed.
    """
    report = verify(spec, registries, gate_specs)
    if not report.passed:
        raise ActivationFailed(None, f"verification failed: {report.failed_checks()}")
    order = topo_order(spec.edges)
    rank = {g: i for i, g in enumerate(order)}
    edges = sorted(
        spec.edges,
        key=lambda e: (rank[format_address(e.source.gate_address)], rank[format_address(e.target)], e.key),
    )
    runners: dict = {}
    for e in edges:
        dest = format_address(e.target)
        runner = EdgeRunner(
            e,
            gates[dest],
            gate_specs[dest].principal,
            lambda e=e: open_client(e.target, e.source.gate_address),
        )
        try:
            runner.open()
        except Exception as err:
            for r in reversed(list(runners.values())):
                r.close()
            raise ActivationFailed(e.key, err) from err
        runners[e] = runner
    return RunningCircuit(spec, order, runners, gates)
