"""Deterministic record-batch operators: filter, project, sort, join, window.

Every operator mints new records. A derived record's id is a hash of the
evaluation salt, the stage index, the operator kind, the ids of the records
that contributed to it, and its payload, so the same inputs always produce
byte-identical outputs. Lineage is transitive: a derived record carries the
ids of its contributors plus everything those contributors descended from.

Dataflows are plain data (``Dataflow.to_json`` / ``Dataflow.from_json``); the
evaluator here is one interpretation of them.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence, Union

from ioda.core_model import DataRecord, canonical_json
from ioda.errors import InvalidSpec, TypeMismatch, UnresolvedJoinSource

COMPARATORS = ("==", "!=", "<", "<=", ">", ">=")
WINDOW_FUNCTIONS = ("sum", "avg", "min", "max", "count")
SORT_ORDERS = ("asc", "desc")

FieldPath = tuple

_MISSING = object()


def _path(p: Any) -> FieldPath:
    if isinstance(p, str):
        p = (p,)
    p = tuple(p)
    if not p or not all(isinstance(s, str) and s for s in p):
        raise InvalidSpec(f"field path must be a non-empty list of non-empty strings, got {p!r}")
    return p


def lookup(payload: Any, path: FieldPath) -> Any:
    """Value at ``path`` or the ``_MISSING`` sentinel."""
    node = payload
    for seg in path:
        if not isinstance(node, dict) or seg not in node:
            return _MISSING
        node = node[seg]
    return node


def scalar_kind(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, (int, float)):
        return "number"
    if isinstance(value, str):
        return "string"
    return "composite"


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Filter:
    path: FieldPath
    cmp: str
    value: Any

    def __post_init__(self):
        object.__setattr__(self, "path", _path(self.path))
        if self.cmp not in COMPARATORS:
            raise InvalidSpec(f"unknown comparator {self.cmp!r}")
        if scalar_kind(self.value) == "composite":
            raise InvalidSpec("filter literal must be a scalar")

    def to_json(self) -> dict:
        return {"op": "filter", "path": list(self.path), "cmp": self.cmp, "value": self.value}


@dataclass(frozen=True)
class Project:
    paths: tuple

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(_path(p) for p in self.paths))

    def to_json(self) -> dict:
        return {"op": "project", "paths": [list(p) for p in self.paths]}


@dataclass(frozen=True)
class Sort:
    path: FieldPath
    order: str = "asc"

    def __post_init__(self):
        object.__setattr__(self, "path", _path(self.path))
        if self.order not in SORT_ORDERS:
            raise InvalidSpec(f"unknown sort order {self.order!r}")

    def to_json(self) -> dict:
        return {"op": "sort", "path": list(self.path), "order": self.order}


@dataclass(frozen=True)
class Join:
    """Inner equi-join against a batch named by ``right``."""

    right: str
    left_path: FieldPath
    right_path: FieldPath

    def __post_init__(self):
        if not isinstance(self.right, str) or not self.right:
            raise InvalidSpec("join source reference must be a non-empty string")
        object.__setattr__(self, "left_path", _path(self.left_path))
        object.__setattr__(self, "right_path", _path(self.right_path))

    def to_json(self) -> dict:
        return {"op": "join", "right": self.right, "left_path": list(self.left_path), "right_path": list(self.right_path)}


@dataclass(frozen=True)
class Window:
    """Tumbling count window; the trailing partial window is emitted too."""

    count: int
    function: str
    path: FieldPath
    output: str

    def __post_init__(self):
        if isinstance(self.count, bool) or not isinstance(self.count, int) or self.count < 1:
            raise InvalidSpec(f"window count must be a positive int, got {self.count!r}")
        if self.function not in WINDOW_FUNCTIONS:
            raise InvalidSpec(f"unknown window function {self.function!r}")
        object.__setattr__(self, "path", _path(self.path))
        if not isinstance(self.output, str) or not self.output:
            raise InvalidSpec("window output field name must be a non-empty string")

    def to_json(self) -> dict:
        return {"op": "window", "count": self.count, "fn": self.function, "path": list(self.path), "as": self.output}


Operator = Union[Filter, Project, Sort, Join, Window]


def operator_from_json(obj: Mapping[str, Any]) -> Operator:
    if not isinstance(obj, Mapping) or "op" not in obj:
        raise InvalidSpec(f"stage must be an object with an 'op' key, got {obj!r}")
    kind = obj["op"]
    try:
        if kind == "filter":
            return Filter(obj["path"], obj["cmp"], obj.get("value"))
        if kind == "project":
            return Project(tuple(obj["paths"]))
        if kind == "sort":
            return Sort(obj["path"], obj.get("order", "asc"))
        if kind == "join":
            return Join(obj["right"], obj["left_path"], obj["right_path"])
        if kind == "window":
            return Window(obj["count"], obj["fn"], obj["path"], obj["as"])
    except KeyError as e:
        raise InvalidSpec(f"{kind} stage is missing field {e.args[0]!r}") from None
    raise InvalidSpec(f"unknown operator {kind!r}")


@dataclass(frozen=True)
class Dataflow:
    stages: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    def __len__(self):
        return len(self.stages)

    def to_json(self) -> list:
        return [op.to_json() for op in self.stages]

    @classmethod
    def from_json(cls, obj: Any) -> "Dataflow":
        if obj is None:
            return cls()
        if not isinstance(obj, list):
            raise InvalidSpec("dataflow must be a JSON array of stages")
        return cls(tuple(operator_from_json(s) for s in obj))

    def join_sources(self) -> list:
        return [op.right for op in self.stages if isinstance(op, Join)]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def derive_id(salt: str, stage: int, kind: str, contributors: Sequence[str], payload: Any) -> str:
    text = canonical_json([salt, stage, kind, list(contributors), payload])
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:32]


def _derive(kind: str, contributors: Sequence[DataRecord], payload: Any, salt: str, stage: int) -> DataRecord:
    lineage = set()
    for c in contributors:
        lineage.update(c.lineage)
        lineage.add(c.id)
    rid = derive_id(salt, stage, kind, [c.id for c in contributors], payload)
    return DataRecord(rid, max(c.ts for c in contributors), payload, frozenset(lineage))


def _compare(value: Any, cmp: str, literal: Any) -> bool:
    vk, lk = scalar_kind(value), scalar_kind(literal)
    if vk == "composite":
        raise TypeMismatch(f"cannot compare a {type(value).__name__} with {cmp}")
    if cmp in ("==", "!="):
        if vk == "null" or lk == "null":
            same = vk == lk
        elif vk != lk:
            raise TypeMismatch(f"cannot compare {vk} with {lk}")
        else:
            same = value == literal
        return same if cmp == "==" else not same
    if vk != lk or vk not in ("number", "string"):
        raise TypeMismatch(f"cannot order {vk} against {lk} with {cmp}")
    if cmp == "<":
        return value < literal
    if cmp == "<=":
        return value <= literal
    if cmp == ">":
        return value > literal
    return value >= literal


def _filter(op: Filter, batch, salt, stage):
    out = []
    for r in batch:
        v = lookup(r.payload, op.path)
        if v is _MISSING:
            continue
        if _compare(v, op.cmp, op.value):
            out.append(_derive("filter", [r], r.payload, salt, stage))
    return out


def _project_payload(payload: Any, paths) -> dict:
    result: dict = {}
    for path in paths:
        v = lookup(payload, path)
        if v is _MISSING:
            continue
        node = result
        for seg in path[:-1]:
            nxt = node.get(seg)
            if not isinstance(nxt, dict):
                nxt = {}
                node[seg] = nxt
            node = nxt
        node[path[-1]] = copy.deepcopy(v)
    return result


def _project(op: Project, batch, salt, stage):
    return [_derive("project", [r], _project_payload(r.payload, op.paths), salt, stage) for r in batch]


def _sort(op: Sort, batch, salt, stage):
    keyed, missing = [], []
    kinds = set()
    for r in batch:
        v = lookup(r.payload, op.path)
        if v is _MISSING or v is None:
            missing.append(r)
            continue
        k = scalar_kind(v)
        if k == "composite":
            raise TypeMismatch(f"cannot sort on a {type(v).__name__} field")
        kinds.add(k)
        keyed.append((v, r))
    if len(kinds) > 1:
        raise TypeMismatch(f"cannot sort mixed kinds {sorted(kinds)}")
    keyed.sort(key=lambda kv: kv[0], reverse=op.order == "desc")
    ordered = [r for _, r in keyed] + missing
    return [_derive("sort", [r], r.payload, salt, stage) for r in ordered]


def _join_key(value: Any):
    if value is _MISSING or value is None:
        return None
    kind = scalar_kind(value)
    if kind == "composite":
        raise TypeMismatch(f"join key must be scalar, got {type(value).__name__}")
    return (kind, value)


def _merge(left: Any, right: Any) -> dict:
    merged = dict(left) if isinstance(left, dict) else {}
    if isinstance(right, dict):
        for k, v in right.items():
            merged["right." + k] = v
    else:
        merged["right"] = right
    return merged


def _join(op: Join, batch, aux, salt, stage):
    index: dict = {}
    for r in aux:
        key = _join_key(lookup(r.payload, op.right_path))
        if key is not None:
            index.setdefault(key, []).append(r)
    out = []
    for left in batch:
        key = _join_key(lookup(left.payload, op.left_path))
        if key is None:
            continue
        for right in index.get(key, ()):
            out.append(_derive("join", [left, right], _merge(left.payload, right.payload), salt, stage))
    return out


def _aggregate(function: str, chunk, path):
    if function == "count":
        return len(chunk)
    values = []
    for r in chunk:
        v = lookup(r.payload, path)
        if v is _MISSING or v is None:
            continue
        if scalar_kind(v) != "number":
            raise TypeMismatch(f"cannot aggregate {scalar_kind(v)} values with {function}")
        values.append(v)
    if function == "sum":
        total = 0
        for v in values:
            total = total + v
        return total
    if not values:
        return None
    if function == "avg":
        total = 0
        for v in values:
            total = total + v
        return total / len(values)
    if function == "min":
        return min(values)
    return max(values)


def _window(op: Window, batch, salt, stage):
    out = []
    for start in range(0, len(batch), op.count):
        chunk = batch[start : start + op.count]
        payload = {op.output: _aggregate(op.function, chunk, op.path)}
        out.append(_derive("window", chunk, payload, salt, stage))
    return out


def apply_operator(
    op: Operator,
    batch: Sequence[DataRecord],
    aux: Optional[Sequence[DataRecord]] = None,
    *,
    salt: str = "",
    stage: int = 0,
) -> list:
    """Apply one operator to an ordered batch; ``aux`` is the right side of a join."""
    batch = list(batch)
    if isinstance(op, Join):
        if aux is None:
            raise UnresolvedJoinSource(f"join stage needs a right-side batch for {op.right!r}")
        return _join(op, batch, list(aux), salt, stage)
    if aux is not None:
        raise ValueError("aux batch is only meaningful for join stages")
    if isinstance(op, Filter):
        return _filter(op, batch, salt, stage)
    if isinstance(op, Project):
        return _project(op, batch, salt, stage)
    if isinstance(op, Sort):
        return _sort(op, batch, salt, stage)
    if isinstance(op, Window):
        return _window(op, batch, salt, stage)
    raise TypeError(f"not an operator: {op!r}")


def select(flt: Filter, batch: Iterable[DataRecord]) -> list:
    """Records passing a filter predicate, returned unchanged (a read, not a derivation)."""
    out = []
    for r in batch:
        v = lookup(r.payload, flt.path)
        if v is not _MISSING and _compare(v, flt.cmp, flt.value):
            out.append(r)
    return out


AuxResolver = Union[Mapping[str, Sequence[DataRecord]], Callable[[str], Sequence[DataRecord]]]


def _resolve_aux(resolver: Optional[AuxResolver], ref: str):
    if resolver is None:
        raise UnresolvedJoinSource(f"no resolver for join source {ref!r}")
    if callable(resolver) and not isinstance(resolver, Mapping):
        try:
            return resolver(ref)
        except KeyError:
            raise UnresolvedJoinSource(f"cannot resolve join source {ref!r}") from None
    if ref not in resolver:
        raise UnresolvedJoinSource(f"cannot resolve join source {ref!r}")
    return resolver[ref]


def apply_dataflow(
    df: Dataflow,
    batch: Iterable[DataRecord],
    aux_resolver: Optional[AuxResolver] = None,
    *,
    salt: str = "",
    on_stage: Optional[Callable[[int, list], None]] = None,
) -> list:
    """Run the stages left to right. ``on_stage(i, records)`` sees each stage's output."""
    aux = {ref: list(_resolve_aux(aux_resolver, ref)) for ref in df.join_sources()}
    current = list(batch)
    for i, op in enumerate(df.stages):
        right = aux[op.right] if isinstance(op, Join) else None
        current = apply_operator(op, current, right, salt=salt, stage=i)
        if on_stage is not None:
            on_stage(i, current)
    return current
