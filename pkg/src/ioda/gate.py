"""Gate runtime: iport ingestion, the record store, oport views, query and watch.

A gate is one kind of thing. It consumes through iports and contributes
through oports, and both directions go through the same ``ingest`` /
``materialize`` code whatever the gate is wired to.

Each ingest is one *epoch*. Within the gate's write lock the iport dataflow
runs, every oport view is recomputed over the would-be store, and only if
all of that succeeds are the derived records appended and the new view
records published as watch events. Readers always see a whole epoch or none
of it.
"""

from __future__ import annotations

import collections
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from ioda.core_model import (
    DataRecord,
    GateAddress,
    GateMetadata,
    OPortMeta,
    Policy,
    Principal,
    Schema,
    conforms,
    format_address,
    parse_address,
    valid_segment,
)
from ioda.dataflow import Dataflow, Filter, apply_dataflow, select
from ioda.errors import AccessDenied, InvalidSpec, UnknownIPort, UnknownOPort, UnresolvedJoinSource
from ioda.governance import ProvenanceLedger, check
from ioda.resolution import Selector
from ioda.store import StoreConfig, open_store

# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IPortSpec:
    name: str
    source: Union[GateAddress, Selector, None] = None
    dataflow: Dataflow = field(default_factory=Dataflow)

    def __post_init__(self):
        if not valid_segment(self.name):
            raise InvalidSpec(f"bad iport name {self.name!r}")
        if isinstance(self.source, GateAddress) and self.source.oport is None:
            raise InvalidSpec(f"iport {self.name} source must name an oport")

    def to_json(self) -> dict:
        out: dict = {"name": self.name, "dataflow": self.dataflow.to_json()}
        if isinstance(self.source, GateAddress):
            out["source"] = format_address(self.source)
        elif isinstance(self.source, Selector):
            out["source"] = {"selector": self.source.to_json()}
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "IPortSpec":
        src = obj.get("source")
        if isinstance(src, str):
            source = parse_address(src)
        elif isinstance(src, Mapping):
            source = Selector.from_json(src["selector"])
        else:
            source = None
        return cls(obj["name"], source, Dataflow.from_json(obj.get("dataflow")))


@dataclass(frozen=True)
class OPortSpec:
    name: str
    schema: Schema = field(default_factory=Schema)
    view_dataflow: Dataflow = field(default_factory=Dataflow)
    exported: bool = False
    policy: Policy = field(default_factory=Policy)
    tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not valid_segment(self.name):
            raise InvalidSpec(f"bad oport name {self.name!r}")
        for e in self.policy.entries:
            if e.oport != self.name:
                raise InvalidSpec(f"policy entry for {e.oport!r} attached to oport {self.name!r}")
        object.__setattr__(self, "tags", dict(self.tags))

    def __hash__(self):
        return hash(self.name)

    def meta(self) -> OPortMeta:
        return OPortMeta(self.schema, self.exported, self.tags)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "schema": self.schema.to_json(),
            "view": self.view_dataflow.to_json(),
            "exported": self.exported,
            "tags": dict(self.tags),
            "policy": [{"role": e.role, "perms": sorted(e.permissions)} for e in self.policy.entries],
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "OPortSpec":
        name = obj["name"]
        return cls(
            name,
            Schema.from_json(obj.get("schema", [])),
            Dataflow.from_json(obj.get("view")),
            bool(obj.get("exported", False)),
            Policy.from_json(obj.get("policy", []), oport=name),
            obj.get("tags", {}),
        )


@dataclass(frozen=True)
class GateSpec:
    address: GateAddress
    metadata: GateMetadata
    iports: tuple = ()
    oports: tuple = ()
    store: StoreConfig = field(default_factory=StoreConfig)
    roles: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "iports", tuple(self.iports))
        object.__setattr__(self, "oports", tuple(self.oports))
        object.__setattr__(self, "roles", frozenset(self.roles))
        if self.address.oport is not None:
            raise InvalidSpec("gate address must be domain/gate")
        if self.metadata.address != self.address:
            raise InvalidSpec("metadata address differs from gate address")
        inames = [p.name for p in self.iports]
        if len(set(inames)) != len(inames):
            raise InvalidSpec(f"duplicate iport names in {format_address(self.address)}: {inames}")
        onames = [p.name for p in self.oports]
        if len(set(onames)) != len(onames):
            raise InvalidSpec(f"duplicate oport names in {format_address(self.address)}: {onames}")
        if set(self.metadata.oports) != set(onames):
            raise InvalidSpec("metadata oports differ from declared oports")
        for p in self.oports:
            if self.metadata.oports[p.name] != p.meta():
                raise InvalidSpec(f"metadata for oport {p.name} disagrees with its spec")

    @classmethod
    def build(
        cls,
        address: Union[str, GateAddress],
        iports: Iterable[IPortSpec] = (),
        oports: Iterable[OPortSpec] = (),
        *,
        description: str = "",
        tags: Optional[Mapping[str, str]] = None,
        store: Optional[StoreConfig] = None,
        roles: Iterable[str] = (),
    ) -> "GateSpec":
        """Assemble a spec whose metadata is derived from its ports."""
        addr = parse_address(address) if isinstance(address, str) else address
        iports, oports = tuple(iports), tuple(oports)
        onames = [p.name for p in oports]
        if len(set(onames)) != len(onames):
            raise InvalidSpec(f"duplicate oport names in {format_address(addr)}: {onames}")
        meta = GateMetadata(addr, description, tags or {}, {p.name: p.meta() for p in oports})
        return cls(addr, meta, iports, oports, store or StoreConfig(), frozenset(roles))

    @property
    def policy(self) -> Policy:
        entries: tuple = ()
        for p in self.oports:
            entries += p.policy.entries
        return Policy(entries)

    @property
    def principal(self) -> Principal:
        """Identity the gate acts under when it consumes another gate's oport."""
        return Principal(format_address(self.address), self.roles)

    def iport(self, name: str) -> IPortSpec:
        for p in self.iports:
            if p.name == name:
                return p
        raise UnknownIPort(f"{format_address(self.address)} has no iport {name!r}")

    def oport(self, name: str) -> OPortSpec:
        for p in self.oports:
            if p.name == name:
                return p
        raise UnknownOPort(f"{format_address(self.address)} has no oport {name!r}")

    def to_json(self) -> dict:
        return {
            "address": format_address(self.address),
            "description": self.metadata.description,
            "tags": dict(self.metadata.tags),
            "roles": sorted(self.roles),
            "store": self.store.to_json(),
            "iports": [p.to_json() for p in self.iports],
            "oports": [p.to_json() for p in self.oports],
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "GateSpec":
        try:
            return cls.build(
                obj["address"],
                [IPortSpec.from_json(p) for p in obj.get("iports", [])],
                [OPortSpec.from_json(p) for p in obj.get("oports", [])],
                description=obj.get("description", ""),
                tags=obj.get("tags", {}),
                store=StoreConfig.from_json(obj.get("store")),
                roles=obj.get("roles", []),
            )
        except KeyError as e:
            raise InvalidSpec(f"gate spec is missing field {e.args[0]!r}") from None


# ---------------------------------------------------------------------------
# Views and subscriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewEvent:
    seq: int
    epoch: int
    epoch_end: int  # seq of the last event published in the same epoch
    record: DataRecord

    def to_json(self) -> dict:
        return {"seq": self.seq, "epoch": self.epoch, "epoch_end": self.epoch_end, "record": self.record.to_json()}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ViewEvent":
        return cls(obj["seq"], obj["epoch"], obj["epoch_end"], DataRecord.from_json(obj["record"]))


@dataclass(frozen=True)
class OPortView:
    oport: str
    records: tuple
    seqs: tuple  # seq at which each record first appeared
    head: int  # last event seq; 0 before any event
    dropped: int = 0  # records removed for failing the oport schema


class Subscription:
    """Push-style cursor over an oport's event log.

    Events land in a private queue as the gate publishes them; the consumer
    takes them with :meth:`get` or :meth:`drain` and acknowledges progress
    with :meth:`ack`. Every event with ``seq > from_seq`` is queued exactly
    once, in order.
    """

    def __init__(self, gate: "Gate", oport: str, from_seq: int):
        self.gate = gate
        self.oport = oport
        self.from_seq = from_seq
        self.acked = from_seq
        self._queue: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._closed = False

    def _push(self, events: Sequence[ViewEvent]) -> None:
        with self._cond:
            if self._closed:
                return
            self._queue.extend(events)
            self._cond.notify_all()

    def get(self, timeout: Optional[float] = None) -> Optional[ViewEvent]:
        """Next event, or None on timeout / close."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._queue or self._closed, timeout):
                return None
            if self._queue:
                return self._queue.popleft()
            return None

    def drain(self) -> list:
        with self._cond:
            out = list(self._queue)
            self._queue.clear()
            return out

    def ack(self, seq: int) -> None:
        if seq > self.acked:
            self.acked = seq

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        self.gate._unsubscribe(self)


class _ViewState:
    def __init__(self, spec: OPortSpec):
        self.spec = spec
        self.view = OPortView(spec.name, (), (), 0, 0)
        self.log: list = []
        self.seq_of: dict = {}
        self.subscribers: list = []


@dataclass(frozen=True)
class IngestReport:
    accepted: int
    derived: int


# ---------------------------------------------------------------------------
# Gate
# ---------------------------------------------------------------------------


class Gate:
    """A live gate. Use :func:`create_gate` to build one."""

    def __init__(self, spec: GateSpec, ledger: Optional[ProvenanceLedger] = None):
        self.spec = spec
        self.address = spec.address
        self.name = format_address(spec.address)
        self.ledger = ledger
        self._iports = {p.name: p for p in spec.iports}
        self._write = threading.RLock()
        self._store = open_store(spec.store)
        self._views = {p.name: _ViewState(p) for p in spec.oports}
        self._epoch = 0
        self._closed = False
        if len(self._store):
            # recovered file store: rebuild views as one epoch
            entries = self._store.entries()
            self._publish(self._compute_views(entries))

    # -- metadata ---------------------------------------------------------

    @property
    def metadata(self) -> GateMetadata:
        return self.spec.metadata

    @property
    def policy(self) -> Policy:
        return self.spec.policy

    # -- store ------------------------------------------------------------

    def scan(self, iport: Optional[str] = None) -> list:
        return self._store.scan(iport)

    def _aux(self, entries):
        def resolve(ref: str):
            if ref == "store":
                return [r for _, r in entries]
            if ref.startswith("iport/"):
                name = ref[len("iport/") :]
                return [r for n, r in entries if n == name]
            raise UnresolvedJoinSource(f"unknown join source {ref!r} in gate {self.name}")

        return resolve

    # -- ingest / materialize ----------------------------------------------

    def ingest(self, iport: str, batch: Iterable[DataRecord]) -> IngestReport:
        spec = self._iports.get(iport)
        if spec is None:
            raise UnknownIPort(f"{self.name} has no iport {iport!r}")
        batch = list(batch)
        with self._write:
            entries = self._store.entries()
            stages: list = []
            salt = f"{self.name}/{iport}@{len(entries)}"
            derived = apply_dataflow(
                spec.dataflow,
                batch,
                self._aux(entries),
                salt=salt,
                on_stage=lambda i, out: stages.append(out),
            )
            new_entries = entries + tuple((iport, r) for r in derived)
            computed = self._compute_views(new_entries)
            self._store.append(iport, derived)
            if self.ledger is not None:
                self.ledger.observe(batch, self.address, iport)
                for out in stages:
                    self.ledger.observe(out, self.address, iport)
            self._publish(computed)
        return IngestReport(len(batch), len(derived))

    def _compute_views(self, entries) -> dict:
        """View dataflows over a store snapshot; raises before anything is published."""
        out = {}
        aux = self._aux(entries)
        records = [r for _, r in entries]
        for name, state in self._views.items():
            stages: list = []
            produced = apply_dataflow(
                state.spec.view_dataflow,
                records,
                aux,
                salt=f"{self.name}/{name}#view",
                on_stage=lambda i, o, stages=stages: stages.append(o),
            )
            keep = [r for r in produced if conforms(r, state.spec.schema)]
            out[name] = (keep, len(produced) - len(keep), stages)
        return out

    def _publish(self, computed: dict) -> None:
        self._epoch += 1
        epoch = self._epoch
        for name, (records, dropped, stages) in computed.items():
            state = self._views[name]
            if self.ledger is not None:
                for out in stages:
                    self.ledger.observe(out, self.address, name)
            fresh = []
            next_seq = len(state.log)
            for r in records:
                if r.id not in state.seq_of:
                    next_seq += 1
                    state.seq_of[r.id] = next_seq
                    fresh.append(r)
            start = len(state.log)
            end = start + len(fresh)
            events = [ViewEvent(start + i + 1, epoch, end, r) for i, r in enumerate(fresh)]
            state.log.extend(events)
            state.view = OPortView(
                name,
                tuple(records),
                tuple(state.seq_of[r.id] for r in records),
                len(state.log),
                dropped,
            )
            if events:
                for sub in list(state.subscribers):
                    sub._push(events)

    def _state(self, oport: str) -> _ViewState:
        state = self._views.get(oport)
        if state is None:
            raise UnknownOPort(f"{self.name} has no oport {oport!r}")
        return state

    def materialize(self, oport: str) -> OPortView:
        """Current view; recomputed on each ingest, cached in between."""
        return self._state(oport).view

    def events(self, oport: str, after: int = 0) -> list:
        state = self._state(oport)
        with self._write:
            return list(state.log[after:])

    # -- serving -------------------------------------------------------------

    def query(self, oport: str, principal: Principal, filter: Optional[Filter] = None) -> list:
        state = self._state(oport)
        if not check(self.spec.policy, principal, oport, "query"):
            raise AccessDenied(f"{principal.principal_id} may not query {self.name}/{oport}")
        records = list(state.view.records)
        if filter is not None:
            records = select(filter, records)
        return records

    def watch(self, oport: str, principal: Principal, from_seq: int = 0) -> Subscription:
        state = self._state(oport)
        if not check(self.spec.policy, principal, oport, "watch"):
            raise AccessDenied(f"{principal.principal_id} may not watch {self.name}/{oport}")
        if from_seq < 0:
            raise ValueError("from_seq must be >= 0")
        sub = Subscription(self, oport, from_seq)
        with self._write:
            backlog = state.log[from_seq:]
            if backlog:
                sub._push(backlog)
            state.subscribers.append(sub)
        return sub

    def _unsubscribe(self, sub: Subscription) -> None:
        with self._write:
            state = self._views.get(sub.oport)
            if state is not None and sub in state.subscribers:
                state.subscribers.remove(sub)

    def close(self) -> None:
        with self._write:
            if self._closed:
                return
            self._closed = True
            for state in self._views.values():
                for sub in list(state.subscribers):
                    sub._closed = True
                    with sub._cond:
                        sub._cond.notify_all()
                state.subscribers.clear()
            self._store.close()


GateHandle = Gate


def create_gate(spec: GateSpec, ledger: Optional[ProvenanceLedger] = None) -> Gate:
    return Gate(spec, ledger)


def ingest(gate: Gate, iport: str, batch: Iterable[DataRecord]) -> IngestReport:
    return gate.ingest(iport, batch)


def materialize(gate: Gate, oport: str) -> OPortView:
    return gate.materialize(oport)


def query(gate: Gate, oport: str, principal: Principal, filter: Optional[Filter] = None) -> list:
    return gate.query(oport, principal, filter)


def watch(gate: Gate, oport: str, principal: Principal, from_seq: int = 0) -> Subscription:
    return gate.watch(oport, principal, from_seq)
