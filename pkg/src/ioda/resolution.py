"""Gate discovery: per-domain registries and selector resolution.

``resolve`` answers within one domain. ``resolve_cross`` adds the border
behaviour: peers are consulted in lexicographic domain order and only ever
return exported oports.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Optional, Protocol

from ioda.core_model import (
    FIELD_TYPES,
    DataRecord,
    GateAddress,
    GateMetadata,
    format_address,
    valid_segment,
)
from ioda.errors import InvalidSpec, NotFound, UnknownPeer, WrongDomain


@dataclass(frozen=True)
class Selector:
    constraints: Mapping[str, str] = field(default_factory=dict)
    schema_requires: tuple = ()
    domain_hint: Optional[str] = None

    def __post_init__(self):
        cons = dict(self.constraints or {})
        for k, v in cons.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise InvalidSpec(f"selector constraints map strings to strings, got {k!r}: {v!r}")
        object.__setattr__(self, "constraints", MappingProxyType(cons))
        reqs = tuple((str(n), str(t)) for n, t in self.schema_requires)
        for _, t in reqs:
            if t not in FIELD_TYPES:
                raise InvalidSpec(f"unknown field type {t!r} in selector")
        object.__setattr__(self, "schema_requires", reqs)
        if not cons and not reqs:
            raise InvalidSpec("selector needs at least one tag constraint or schema requirement")
        if self.domain_hint is not None and not valid_segment(self.domain_hint):
            raise InvalidSpec(f"bad domain hint {self.domain_hint!r}")

    def __eq__(self, other):
        if not isinstance(other, Selector):
            return NotImplemented
        return (dict(self.constraints), self.schema_requires, self.domain_hint) == (
            dict(other.constraints),
            other.schema_requires,
            other.domain_hint,
        )

    def __hash__(self):
        return hash((tuple(sorted(self.constraints.items())), self.schema_requires, self.domain_hint))

    def to_json(self) -> dict:
        out: dict = {"tags": dict(self.constraints)}
        if self.schema_requires:
            out["schema"] = [{"name": n, "type": t} for n, t in self.schema_requires]
        if self.domain_hint is not None:
            out["domain"] = self.domain_hint
        return out

    @classmethod
    def from_json(cls, obj: Any) -> "Selector":
        if not isinstance(obj, Mapping):
            raise InvalidSpec("selector must be a JSON object")
        reqs = tuple((f["name"], f["type"]) for f in obj.get("schema", ()))
        return cls(obj.get("tags", {}), reqs, obj.get("domain"))


def matches(meta: GateMetadata, oport: str, sel: Selector) -> bool:
    port = meta.oports[oport]
    tags = {**meta.tags, **port.tags}
    for k, v in sel.constraints.items():
        if tags.get(k) != v:
            return False
    for name, type_name in sel.schema_requires:
        f = port.schema.field(name)
        if f is None or f.type != type_name:
            return False
    return True


def tag_overlap(meta: GateMetadata, oport: str, requester: Optional[GateMetadata]) -> int:
    """Tag keys the candidate shares with the requester, with equal values."""
    if requester is None:
        return 0
    tags = {**meta.tags, **meta.oports[oport].tags}
    return sum(1 for k, v in requester.tags.items() if tags.get(k) == v)


def rank_candidates(entries: Iterable[GateMetadata], requester, sel: Selector, exported_only: bool) -> list:
    """All matching oport addresses, best first."""
    ranked = []
    for meta in entries:
        for oport, port in meta.oports.items():
            if exported_only and not port.exported:
                continue
            if matches(meta, oport, sel):
                addr = meta.address.with_oport(oport)
                ranked.append((-tag_overlap(meta, oport, requester), format_address(addr), addr))
    ranked.sort(key=lambda t: (t[0], t[1]))
    return [addr for _, _, addr in ranked]


class RegistryEndpoint(Protocol):
    def resolve_exported(self, requester: Optional[GateMetadata], sel: Selector) -> GateAddress: ...


class DomainRegistry:
    """Gate name -> metadata for one domain, with last-write-wins registration."""

    def __init__(self, domain: str):
        if not valid_segment(domain):
            raise InvalidSpec(f"bad domain name {domain!r}")
        self.domain = domain
        self._entries: Mapping[str, GateMetadata] = MappingProxyType({})
        self._keys: Mapping[str, bytes] = MappingProxyType({})
        self._lock = threading.Lock()

    def register(self, meta: GateMetadata, verify_key: Optional[bytes] = None) -> "DomainRegistry":
        if meta.address.domain != self.domain:
            raise WrongDomain(f"gate {format_address(meta.address)} does not belong to domain {self.domain}")
        with self._lock:
            entries = dict(self._entries)
            entries[meta.address.gate] = meta
            keys = dict(self._keys)
            if verify_key is not None:
                keys[meta.address.gate] = bytes(verify_key)
            # swap whole snapshots so readers never see a half-applied update
            self._entries = MappingProxyType(entries)
            self._keys = MappingProxyType(keys)
        return self

    def unregister(self, gate: str) -> None:
        with self._lock:
            entries = dict(self._entries)
            entries.pop(gate, None)
            keys = dict(self._keys)
            keys.pop(gate, None)
            self._entries = MappingProxyType(entries)
            self._keys = MappingProxyType(keys)

    def listing(self) -> list:
        return sorted(self._entries)

    def lookup(self, gate: str) -> GateMetadata:
        try:
            return self._entries[gate]
        except KeyError:
            raise NotFound(f"no gate {gate!r} in domain {self.domain}") from None

    def verify_key(self, address: GateAddress) -> Optional[bytes]:
        if address.domain != self.domain:
            return None
        return self._keys.get(address.gate)

    def entries(self) -> Mapping[str, GateMetadata]:
        return self._entries

    def resolve(self, requester: Optional[GateMetadata], sel: Selector, exported_only: bool = False) -> GateAddress:
        ranked = rank_candidates(self._entries.values(), requester, sel, exported_only)
        if not ranked:
            raise NotFound(f"no oport in {self.domain} matches {sel.to_json()}")
        return ranked[0]

    def resolve_exported(self, requester: Optional[GateMetadata], sel: Selector) -> GateAddress:
        return self.resolve(requester, sel, exported_only=True)

    # registry entries are ordinary records too

    def to_records(self) -> list:
        out = []
        for gate in sorted(self._entries):
            key = self._keys.get(gate)
            payload = {
                "registry": self.domain,
                "gate": gate,
                "metadata": self._entries[gate].to_payload(),
                "verify_key": key.hex() if key is not None else None,
            }
            rid = hashlib.sha256(f"registry:{self.domain}/{gate}".encode()).hexdigest()[:32]
            out.append(DataRecord(rid, 0, payload))
        return out

    @classmethod
    def from_records(cls, domain: str, records: Iterable[DataRecord]) -> "DomainRegistry":
        reg = cls(domain)
        for r in records:
            key = r.payload.get("verify_key")
            reg.register(GateMetadata.from_payload(r.payload["metadata"]), bytes.fromhex(key) if key else None)
        return reg


class PeeringTable:
    def __init__(self, local_domain: str, peers: Optional[Mapping[str, RegistryEndpoint]] = None):
        self.local_domain = local_domain
        self._peers: dict = {}
        for domain, endpoint in (peers or {}).items():
            self.add(domain, endpoint)

    def add(self, domain: str, endpoint: RegistryEndpoint) -> None:
        if domain == self.local_domain:
            raise InvalidSpec(f"domain {domain} cannot peer with itself")
        if not valid_segment(domain):
            raise InvalidSpec(f"bad peer domain {domain!r}")
        self._peers[domain] = endpoint

    def __contains__(self, domain):
        return domain in self._peers

    def __getitem__(self, domain):
        return self._peers[domain]

    def domains(self) -> list:
        return sorted(self._peers)


def register(reg: DomainRegistry, meta: GateMetadata, verify_key: Optional[bytes] = None) -> DomainRegistry:
    return reg.register(meta, verify_key)


def resolve(reg: DomainRegistry, requester: Optional[GateMetadata], sel: Selector) -> GateAddress:
    return reg.resolve(requester, sel)


def resolve_cross(
    local: DomainRegistry,
    peers: PeeringTable,
    requester: Optional[GateMetadata],
    sel: Selector,
) -> GateAddress:
    """Local first, then peers in domain order; peers only yield exported oports."""
    hint = sel.domain_hint
    if hint is not None:
        if hint == local.domain:
            return local.resolve(requester, sel)
        if hint not in peers:
            raise UnknownPeer(f"domain {hint!r} is not a peer of {local.domain}")
        return peers[hint].resolve_exported(requester, sel)
    try:
        return local.resolve(requester, sel)
    except NotFound:
        pass
    for domain in peers.domains():
        try:
            return peers[domain].resolve_exported(requester, sel)
        except NotFound:
            continue
    raise NotFound(f"no oport in {local.domain} or its peers matches {sel.to_json()}")

