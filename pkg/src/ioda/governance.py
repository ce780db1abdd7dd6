"""Access decisions, provenance tracking and static governance rules."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Union

from ioda.core_model import (
    PERMISSIONS,
    DataRecord,
    GateAddress,
    GateMetadata,
    Policy,
    Principal,
    canonical_json,
    format_address,
    parse_address,
)
from ioda.errors import InvalidSpec, LedgerError, UnknownRecord

# ---------------------------------------------------------------------------
# RBAC
# ---------------------------------------------------------------------------


def check(policy: Policy, principal: Principal, oport: str, perm: str) -> bool:
    """Allow iff some role of the principal is granted ``perm`` on ``oport``. Default deny."""
    if perm not in PERMISSIONS:
        return False
    for entry in policy.entries:
        if entry.oport == oport and entry.role in principal.roles and perm in entry.permissions:
            return True
    return False


# ---------------------------------------------------------------------------
# Provenance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerEntry:
    record_id: str
    lineage: frozenset
    gate: str
    port: str
    ts: int

    def to_json(self) -> dict:
        return {
            "id": self.record_id,
            "lineage": sorted(self.lineage),
            "gate": self.gate,
            "port": self.port,
            "ts": self.ts,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "LedgerEntry":
        return cls(obj["id"], frozenset(obj["lineage"]), obj["gate"], obj["port"], obj["ts"])


class ProvenanceLedger:
    """Append-only lineage map. Every lineage link points at an earlier entry
    or at an id declared external, which keeps the link graph acyclic."""

    def __init__(self, domain: Optional[str] = None):
        self.domain = domain
        self._entries: dict = {}
        self._external: set = set()
        self._lock = threading.Lock()

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._entries

    def __len__(self):
        return len(self._entries)

    def get(self, record_id: str) -> Optional[LedgerEntry]:
        return self._entries.get(record_id)

    def is_external(self, record_id: str) -> bool:
        return record_id in self._external and record_id not in self._entries

    def known(self, record_id: str) -> bool:
        return record_id in self._entries or record_id in self._external

    def entries(self) -> list:
        return list(self._entries.values())

    def declare_external(self, ids: Iterable[str]) -> None:
        with self._lock:
            self._external.update(i for i in ids if i not in self._entries)

    def _reaches(self, start: Iterable[str], target: str) -> bool:
        seen = set()
        stack = list(start)
        while stack:
            rid = stack.pop()
            if rid == target:
                return True
            if rid in seen:
                continue
            seen.add(rid)
            entry = self._entries.get(rid)
            if entry is not None:
                stack.extend(entry.lineage)
        return False

    def append(self, entry: LedgerEntry) -> None:
        with self._lock:
            self._append_locked(entry)

    def _append_locked(self, entry: LedgerEntry) -> None:
        rid = entry.record_id
        if rid in self._entries:
            raise LedgerError(f"record {rid} already has a ledger entry")
        if rid in entry.lineage:
            raise LedgerError(f"record {rid} cannot descend from itself")
        missing = [l for l in entry.lineage if l not in self._entries and l not in self._external]
        if missing:
            raise LedgerError(f"record {rid} references unknown lineage {sorted(missing)[:3]}")
        if rid in self._external and self._reaches(entry.lineage, rid):
            raise LedgerError(f"appending {rid} would close a lineage cycle")
        self._entries[rid] = entry
        self._external.discard(rid)

    def observe(self, records: Iterable[DataRecord], gate: Union[str, GateAddress], port: str) -> int:
        """Ingest hook: record every not-yet-known record, declaring foreign ancestry external."""
        gate = gate if isinstance(gate, str) else format_address(gate)
        added = 0
        with self._lock:
            for r in records:
                if r.id in self._entries:
                    continue
                self._external.update(l for l in r.lineage if l not in self._entries)
                self._append_locked(LedgerEntry(r.id, r.lineage, gate, port, r.ts))
                added += 1
        return added

    def export_lines(self) -> str:
        return "".join(canonical_json(e.to_json()) + "\n" for e in self._entries.values())

    @classmethod
    def from_lines(cls, text: str, domain: Optional[str] = None) -> "ProvenanceLedger":
        ledger = cls(domain)
        entries = [LedgerEntry.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]
        present = {e.record_id for e in entries}
        ledger.declare_external(l for e in entries for l in e.lineage if l not in present)
        for e in entries:
            ledger.append(e)
        return ledger


class FederatedLedger:
    """Read-only union of several ledgers; real entries win over external stubs."""

    def __init__(self, ledgers: Iterable[ProvenanceLedger]):
        self.ledgers = list(ledgers)

    def get(self, record_id: str) -> Optional[LedgerEntry]:
        for ledger in self.ledgers:
            entry = ledger.get(record_id)
            if entry is not None:
                return entry
        return None

    def __contains__(self, record_id):
        return self.get(record_id) is not None

    def entries(self) -> list:
        seen, out = set(), []
        for ledger in self.ledgers:
            for e in ledger.entries():
                if e.record_id not in seen:
                    seen.add(e.record_id)
                    out.append(e)
        return out


@dataclass
class ProvenanceDAG:
    root: str
    nodes: dict  # record id -> LedgerEntry, or None for external ancestors
    edges: set  # (child id, parent id), transitively reduced

    def leaves(self) -> set:
        return {rid for rid, e in self.nodes.items() if e is None or not e.lineage}

    def parents(self, rid: str) -> set:
        return {p for c, p in self.edges if c == rid}

    def to_json(self) -> dict:
        return {
            "root": self.root,
            "nodes": [
                self.nodes[rid].to_json() if self.nodes[rid] is not None else {"id": rid, "external": True}
                for rid in sorted(self.nodes)
            ],
            "edges": [list(e) for e in sorted(self.edges)],
            "leaves": sorted(self.leaves()),
        }


def trace(ledger, record_id: str) -> ProvenanceDAG:
    """Ancestor DAG of a record, down to source records."""
    root = ledger.get(record_id)
    if root is None:
        raise UnknownRecord(f"record {record_id} has no ledger entry")
    nodes: dict = {}
    stack = [record_id]
    while stack:
        rid = stack.pop()
        if rid in nodes:
            continue
        entry = ledger.get(rid)
        nodes[rid] = entry
        if entry is not None:
            stack.extend(entry.lineage)

    ancestors: dict = {}

    def ancestors_of(rid: str) -> frozenset:
        if rid in ancestors:
            return ancestors[rid]
        # iterative post-order to stay clear of the recursion limit on deep chains
        work = [(rid, False)]
        while work:
            node, done = work.pop()
            if node in ancestors:
                continue
            entry = nodes.get(node)
            lineage = entry.lineage if entry is not None else frozenset()
            if done:
                acc = set(lineage)
                for p in lineage:
                    acc |= ancestors[p]
                ancestors[node] = frozenset(acc)
                continue
            work.append((node, True))
            work.extend((p, False) for p in lineage if p not in ancestors)
        return ancestors[rid]

    edges = set()
    for rid, entry in nodes.items():
        if entry is None:
            continue
        lineage = entry.lineage
        covered = set()
        for q in lineage:
            covered |= ancestors_of(q)
        for p in lineage:
            if p not in covered:
                edges.add((rid, p))
    return ProvenanceDAG(record_id, nodes, edges)


def lineage_depth(ledger, record_id: str, _memo: Optional[dict] = None) -> int:
    """Longest derivation chain below a record; sources and external ids have depth 0."""
    memo = {} if _memo is None else _memo
    work = [(record_id, False)]
    while work:
        rid, done = work.pop()
        if rid in memo:
            continue
        entry = ledger.get(rid)
        if entry is None or not entry.lineage:
            memo[rid] = 0
            continue
        if done:
            memo[rid] = 1 + max(memo[p] for p in entry.lineage)
            continue
        work.append((rid, True))
        work.extend((p, False) for p in entry.lineage if p not in memo)
    return memo[record_id]


# ---------------------------------------------------------------------------
# Governance rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaxLineageDepth:
    n: int

    def __post_init__(self):
        if isinstance(self.n, bool) or not isinstance(self.n, int) or self.n < 1:
            raise InvalidSpec("MaxLineageDepth needs n >= 1")

    def to_json(self):
        return {"rule": "max_lineage_depth", "n": self.n}


@dataclass(frozen=True)
class RequireField:
    """The named oport's schema must declare ``field`` as required."""

    oport: str
    field: str

    def __post_init__(self):
        addr = parse_address(self.oport)
        if addr.oport is None:
            raise InvalidSpec(f"RequireField needs a domain/gate/oport address, got {self.oport!r}")

    def to_json(self):
        return {"rule": "require_field", "oport": self.oport, "field": self.field}


@dataclass(frozen=True)
class ForbidExportTag:
    """Oports carrying this tag key must not be exported."""

    tag: str

    def to_json(self):
        return {"rule": "forbid_export_tag", "tag": self.tag}


GovernanceRule = Union[MaxLineageDepth, RequireField, ForbidExportTag]


def rule_from_json(obj: Mapping[str, Any]) -> GovernanceRule:
    kind = obj.get("rule")
    if kind == "max_lineage_depth":
        return MaxLineageDepth(obj["n"])
    if kind == "require_field":
        return RequireField(obj["oport"], obj["field"])
    if kind == "forbid_export_tag":
        return ForbidExportTag(obj["tag"])
    raise InvalidSpec(f"unknown governance rule {kind!r}")


@dataclass(frozen=True, order=True)
class Violation:
    rule: str
    gate: str
    oport: Optional[str] = None
    record: Optional[str] = None
    message: str = field(default="", compare=False)

    def to_json(self) -> dict:
        return {"rule": self.rule, "gate": self.gate, "oport": self.oport, "record": self.record, "message": self.message}


@dataclass
class AuditReport:
    violations: list

    @property
    def compliant(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {"compliant": self.compliant, "violations": [v.to_json() for v in self.violations]}


def _metadata(gate) -> GateMetadata:
    return gate if isinstance(gate, GateMetadata) else gate.metadata


def audit(rules: Iterable[GovernanceRule], gates: Iterable, ledger=None) -> AuditReport:
    """Check a deployment (gate specs or metadata, plus a ledger) against the rules."""
    metas = sorted((_metadata(g) for g in gates), key=lambda m: format_address(m.address))
    by_addr = {format_address(m.address): m for m in metas}
    found = []
    for rule in rules:
        if isinstance(rule, ForbidExportTag):
            for meta in metas:
                for name, port in sorted(meta.oports.items()):
                    if rule.tag in port.tags and port.exported:
                        found.append(
                            Violation(
                                "forbid_export_tag",
                                format_address(meta.address),
                                name,
                                None,
                                f"oport tagged {rule.tag!r} is exported",
                            )
                        )
        elif isinstance(rule, RequireField):
            addr = parse_address(rule.oport)
            gate = format_address(addr.gate_address)
            meta = by_addr.get(gate)
            port = meta.oports.get(addr.oport) if meta is not None else None
            if port is None:
                found.append(Violation("require_field", gate, addr.oport, None, "oport does not exist"))
                continue
            f = port.schema.field(rule.field)
            if f is None or not f.required:
                found.append(
                    Violation("require_field", gate, addr.oport, None, f"schema does not require {rule.field!r}")
                )
        elif isinstance(rule, MaxLineageDepth):
            if ledger is None:
                continue
            memo: dict = {}
            for entry in ledger.entries():
                depth = lineage_depth(ledger, entry.record_id, memo)
                if depth > rule.n:
                    found.append(
                        Violation(
                            "max_lineage_depth",
                            entry.gate,
                            entry.port,
                            entry.record_id,
                            f"lineage depth {depth} exceeds {rule.n}",
                        )
                    )
        else:
            raise InvalidSpec(f"not a governance rule: {rule!r}")
    return AuditReport(sorted(found))
