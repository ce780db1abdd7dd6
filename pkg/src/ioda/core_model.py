"""Shared data model: addresses, records, schemas, metadata, principals, policies.

All types here are immutable values. Payloads are JSON-like trees and are
treated as read-only once wrapped in a :class:`DataRecord`.
"""

from __future__ import annotations

import json
import re
import secrets
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Optional

from ioda.errors import InvalidRecord, InvalidSpec, MalformedAddress

SEGMENT_RE = re.compile(r"[a-z0-9._-]{1,64}")
RECORD_ID_RE = re.compile(r"[0-9a-f]{32}")
MAX_PAYLOAD_DEPTH = 32
MAX_TAGS = 64

FIELD_TYPES = ("string", "int", "float", "bool", "timestamp", "list", "map")
PERMISSIONS = ("query", "watch")


def valid_segment(text: Any) -> bool:
    return isinstance(text, str) and SEGMENT_RE.fullmatch(text) is not None


def canonical_json(value: Any) -> str:
    """Deterministic JSON text: sorted keys, no whitespace, no NaN."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


# ---------------------------------------------------------------------------
# Addresses
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class GateAddress:
    domain: str
    gate: str
    oport: Optional[str] = None

    def __post_init__(self):
        for seg in (self.domain, self.gate):
            if not valid_segment(seg):
                raise MalformedAddress(f"illegal address segment {seg!r}")
        if self.oport is not None and not valid_segment(self.oport):
            raise MalformedAddress(f"illegal address segment {self.oport!r}")

    @property
    def gate_address(self) -> "GateAddress":
        """The ``domain/gate`` part, without the oport."""
        if self.oport is None:
            return self
        return GateAddress(self.domain, self.gate)

    def with_oport(self, oport: str) -> "GateAddress":
        return GateAddress(self.domain, self.gate, oport)

    def __str__(self) -> str:
        return format_address(self)


def parse_address(text: str) -> GateAddress:
    """Parse ``domain/gate`` or ``domain/gate/oport``."""
    if not isinstance(text, str):
        raise MalformedAddress(f"address must be a string, got {type(text).__name__}")
    parts = text.split("/")
    if len(parts) not in (2, 3):
        raise MalformedAddress(f"{text!r}: expected 2 or 3 segments, got {len(parts)}")
    for seg in parts:
        if not valid_segment(seg):
            raise MalformedAddress(f"{text!r}: illegal segment {seg!r}")
    return GateAddress(*parts)


def format_address(a: GateAddress) -> str:
    if a.oport is None:
        return f"{a.domain}/{a.gate}"
    return f"{a.domain}/{a.gate}/{a.oport}"


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


def new_record_id() -> str:
    return secrets.token_hex(16)


def payload_depth(value: Any) -> int:
    """Nesting depth of a JSON-like value; scalars have depth 0."""
    depth = 0
    stack = [(value, 0)]
    while stack:
        node, d = stack.pop()
        if isinstance(node, dict):
            children = node.values()
        elif isinstance(node, list):
            children = node
        else:
            depth = max(depth, d)
            continue
        depth = max(depth, d + 1)
        if d + 1 > MAX_PAYLOAD_DEPTH:
            return d + 1
        stack.extend((c, d + 1) for c in children)
    return depth


def _check_payload(value: Any, depth: int = 0) -> None:
    if depth > MAX_PAYLOAD_DEPTH:
        raise InvalidRecord(f"payload nesting exceeds {MAX_PAYLOAD_DEPTH}")
    if value is None or isinstance(value, (bool, int, str)):
        return
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            raise InvalidRecord("payload floats must be finite")
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise InvalidRecord(f"payload map keys must be strings, got {k!r}")
            _check_payload(v, depth + 1)
        return
    if isinstance(value, list):
        for v in value:
            _check_payload(v, depth + 1)
        return
    raise InvalidRecord(f"unsupported payload value of type {type(value).__name__}")


@dataclass(frozen=True)
class DataRecord:
    """A timestamped JSON-like payload with identity and lineage."""

    id: str
    ts: int
    payload: Any
    lineage: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not isinstance(self.id, str) or RECORD_ID_RE.fullmatch(self.id) is None:
            raise InvalidRecord(f"record id must be 32 lowercase hex chars, got {self.id!r}")
        if isinstance(self.ts, bool) or not isinstance(self.ts, int) or self.ts < 0:
            raise InvalidRecord(f"timestamp must be a non-negative int, got {self.ts!r}")
        if not isinstance(self.lineage, frozenset):
            object.__setattr__(self, "lineage", frozenset(self.lineage))
        for rid in self.lineage:
            if not isinstance(rid, str) or RECORD_ID_RE.fullmatch(rid) is None:
                raise InvalidRecord(f"lineage entry {rid!r} is not a record id")
        if self.id in self.lineage:
            raise InvalidRecord(f"record {self.id} lists itself in its lineage")
        _check_payload(self.payload)

    @classmethod
    def new(cls, payload: Any, ts: int = 0, lineage: Iterable[str] = ()) -> "DataRecord":
        return cls(new_record_id(), ts, payload, frozenset(lineage))

    def to_json(self) -> dict:
        return {"id": self.id, "ts": self.ts, "payload": self.payload, "lineage": sorted(self.lineage)}

    @classmethod
    def from_json(cls, obj: Any) -> "DataRecord":
        if not isinstance(obj, dict):
            raise InvalidRecord("serialized record must be a JSON object")
        keys = set(obj)
        if keys != {"id", "ts", "payload", "lineage"}:
            extra = sorted(keys - {"id", "ts", "payload", "lineage"})
            missing = sorted({"id", "ts", "payload", "lineage"} - keys)
            raise InvalidRecord(f"bad record keys (unknown={extra}, missing={missing})")
        if not isinstance(obj["lineage"], list):
            raise InvalidRecord("lineage must be a list")
        return cls(obj["id"], obj["ts"], obj["payload"], frozenset(obj["lineage"]))

    def canonical(self) -> str:
        return canonical_json(self.to_json())

    @classmethod
    def from_canonical(cls, text: str) -> "DataRecord":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise InvalidRecord(f"record is not valid JSON: {e}") from None
        return cls.from_json(obj)


def canonical_batch(records: Iterable[DataRecord]) -> str:
    return canonical_json([r.to_json() for r in records])


# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SchemaField:
    name: str
    type: str
    required: bool = True

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise InvalidSpec("schema field name must be a non-empty string")
        if self.type not in FIELD_TYPES:
            raise InvalidSpec(f"unknown schema field type {self.type!r}")


def value_has_type(value: Any, type_name: str) -> bool:
    if type_name == "string":
        return isinstance(value, str)
    if type_name == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if type_name == "float":
        # ints are acceptable where floats are declared
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if type_name == "bool":
        return isinstance(value, bool)
    if type_name == "timestamp":
        return isinstance(value, int) and not isinstance(value, bool) and value >= 0
    if type_name == "list":
        return isinstance(value, list)
    if type_name == "map":
        return isinstance(value, dict)
    return False


@dataclass(frozen=True)
class Schema:
    fields: tuple = ()

    def __post_init__(self):
        fs = tuple(f if isinstance(f, SchemaField) else SchemaField(*f) for f in self.fields)
        object.__setattr__(self, "fields", fs)
        names = [f.name for f in fs]
        if len(set(names)) != len(names):
            raise InvalidSpec(f"duplicate schema field names in {names}")

    def field(self, name: str) -> Optional[SchemaField]:
        for f in self.fields:
            if f.name == name:
                return f
        return None

    def to_json(self) -> list:
        return [{"name": f.name, "type": f.type, "required": f.required} for f in self.fields]

    @classmethod
    def from_json(cls, obj: Any) -> "Schema":
        if not isinstance(obj, list):
            raise InvalidSpec("schema must be a list of fields")
        return cls(tuple(SchemaField(f["name"], f["type"], bool(f.get("required", True))) for f in obj))


def conforms(record: DataRecord, schema: Schema) -> bool:
    """True iff every required field is present at the payload root with its declared type.

    Extra fields are permitted. Optional fields are not type-checked when absent.
    """
    payload = record.payload
    if not isinstance(payload, dict):
        return not any(f.required for f in schema.fields)
    for f in schema.fields:
        if f.name not in payload:
            if f.required:
                return False
            continue
        if f.required and not value_has_type(payload[f.name], f.type):
            return False
    return True


# ---------------------------------------------------------------------------
# Metadata
# ---------------------------------------------------------------------------


def _frozen_tags(tags: Optional[Mapping[str, str]]) -> Mapping[str, str]:
    tags = dict(tags or {})
    if len(tags) > MAX_TAGS:
        raise InvalidSpec(f"at most {MAX_TAGS} tags allowed, got {len(tags)}")
    for k, v in tags.items():
        if not isinstance(k, str) or not isinstance(v, str):
            raise InvalidSpec(f"tags must map strings to strings, got {k!r}: {v!r}")
    return MappingProxyType(tags)


@dataclass(frozen=True)
class OPortMeta:
    schema: Schema
    exported: bool = False
    tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tags", _frozen_tags(self.tags))

    def __eq__(self, other):
        if not isinstance(other, OPortMeta):
            return NotImplemented
        return (self.schema, self.exported, dict(self.tags)) == (other.schema, other.exported, dict(other.tags))

    __hash__ = None


@dataclass(frozen=True)
class GateMetadata:
    address: GateAddress
    description: str = ""
    tags: Mapping[str, str] = field(default_factory=dict)
    oports: Mapping[str, OPortMeta] = field(default_factory=dict)

    def __post_init__(self):
        if self.address.oport is not None:
            raise InvalidSpec("gate metadata address must be domain/gate")
        object.__setattr__(self, "tags", _frozen_tags(self.tags))
        for name in self.oports:
            if not valid_segment(name):
                raise InvalidSpec(f"oport name {name!r} is not a valid segment")
        object.__setattr__(self, "oports", MappingProxyType(dict(self.oports)))

    def __eq__(self, other):
        if not isinstance(other, GateMetadata):
            return NotImplemented
        return (
            self.address == other.address
            and self.description == other.description
            and dict(self.tags) == dict(other.tags)
            and dict(self.oports) == dict(other.oports)
        )

    __hash__ = None

    def to_payload(self) -> dict:
        return {
            "address": format_address(self.address),
            "description": self.description,
            "tags": dict(self.tags),
            "oports": {
                name: {"schema": o.schema.to_json(), "exported": o.exported, "tags": dict(o.tags)}
                for name, o in sorted(self.oports.items())
            },
        }

    @classmethod
    def from_payload(cls, obj: Mapping[str, Any]) -> "GateMetadata":
        return cls(
            address=parse_address(obj["address"]),
            description=obj.get("description", ""),
            tags=obj.get("tags", {}),
            oports={
                name: OPortMeta(Schema.from_json(o["schema"]), bool(o.get("exported", False)), o.get("tags", {}))
                for name, o in obj.get("oports", {}).items()
            },
        )

    def to_record(self, record_id: Optional[str] = None, ts: int = 0) -> DataRecord:
        """Metadata is data: wrap it in an ordinary record."""
        return DataRecord(record_id or new_record_id(), ts, self.to_payload())

    @classmethod
    def from_record(cls, record: DataRecord) -> "GateMetadata":
        return cls.from_payload(record.payload)


# ---------------------------------------------------------------------------
# Principals and policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Principal:
    principal_id: str
    roles: frozenset = frozenset()

    def __post_init__(self):
        if not isinstance(self.principal_id, str) or not self.principal_id:
            raise InvalidSpec("principal_id must be a non-empty string")
        object.__setattr__(self, "roles", frozenset(self.roles))

    def to_json(self) -> dict:
        return {"id": self.principal_id, "roles": sorted(self.roles)}

    @classmethod
    def from_json(cls, obj: Any) -> "Principal":
        if not isinstance(obj, dict) or "id" not in obj:
            raise InvalidSpec("principal must be an object with an 'id'")
        return cls(obj["id"], frozenset(obj.get("roles", ())))


@dataclass(frozen=True)
class PolicyEntry:
    role: str
    oport: str
    permissions: frozenset

    def __post_init__(self):
        perms = frozenset(self.permissions)
        bad = perms - set(PERMISSIONS)
        if bad:
            raise InvalidSpec(f"unknown permissions {sorted(bad)}")
        object.__setattr__(self, "permissions", perms)


@dataclass(frozen=True)
class Policy:
    """RBAC grants; absence of an entry means deny."""

    entries: tuple = ()

    def __post_init__(self):
        es = tuple(e if isinstance(e, PolicyEntry) else PolicyEntry(*e) for e in self.entries)
        seen = set()
        for e in es:
            key = (e.role, e.oport)
            if key in seen:
                raise InvalidSpec(f"duplicate policy entry for role {e.role!r} on oport {e.oport!r}")
            seen.add(key)
        object.__setattr__(self, "entries", es)

    def merged(self, other: "Policy") -> "Policy":
        return Policy(self.entries + other.entries)

    def for_oport(self, oport: str) -> "Policy":
        return Policy(tuple(e for e in self.entries if e.oport == oport))

    def to_json(self) -> list:
        return [{"role": e.role, "oport": e.oport, "perms": sorted(e.permissions)} for e in self.entries]

    @classmethod
    def from_json(cls, obj: Any, oport: Optional[str] = None) -> "Policy":
        entries = []
        for e in obj or ():
            name = e.get("oport", oport)
            if name is None:
                raise InvalidSpec("policy entry needs an oport")
            entries.append(PolicyEntry(e["role"], name, frozenset(e.get("perms", ()))))
        return cls(tuple(entries))
