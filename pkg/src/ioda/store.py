"""Append-only record logs backing a gate."""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass
from typing import Iterable, Optional

from ioda.core_model import DataRecord, valid_segment
from ioda.errors import InvalidRecord, InvalidSpec, StoreUnavailable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StoreConfig:
    backend: str = "memory"
    path: Optional[str] = None

    def __post_init__(self):
        if self.backend not in ("memory", "file"):
            raise InvalidSpec(f"unknown store backend {self.backend!r}")
        if self.backend == "file" and not self.path:
            raise InvalidSpec("file store needs a path")

    def to_json(self) -> dict:
        if self.backend == "file":
            return {"backend": "file", "path": self.path}
        return {"backend": "memory"}

    @classmethod
    def from_json(cls, obj) -> "StoreConfig":
        if obj is None:
            return cls()
        return cls(obj.get("backend", "memory"), obj.get("path"))


class MemoryStore:
    def __init__(self):
        self._entries: tuple = ()
        self._lock = threading.Lock()

    def append(self, iport: str, records: Iterable[DataRecord]) -> None:
        new = tuple((iport, r) for r in records)
        with self._lock:
            self._entries = self._entries + new

    def entries(self) -> tuple:
        return self._entries

    def scan(self, iport: Optional[str] = None) -> list:
        if iport is None:
            return [r for _, r in self._entries]
        return [r for name, r in self._entries if name == iport]

    def __len__(self):
        return len(self._entries)

    def close(self) -> None:
        pass


class FileStore(MemoryStore):
    """One ``iport=<name>\\t<canonical record>`` line per record."""

    def __init__(self, path: str, fsync: bool = False):
        super().__init__()
        self.path = path
        self._fsync = fsync
        try:
            parent = os.path.dirname(os.path.abspath(path))
            os.makedirs(parent, exist_ok=True)
            self._recover()
            self._fh = open(path, "a", encoding="utf-8", newline="\n")
        except OSError as e:
            raise StoreUnavailable(f"cannot open store file {path}: {e}") from e

    def _recover(self) -> None:
        if not os.path.exists(self.path):
            return
        with open(self.path, "r", encoding="utf-8", newline="\n") as fh:
            data = fh.read()
        lines = data.split("\n")
        tail = lines.pop()
        if tail:
            # torn final write: drop it so the log stays line-aligned
            log.warning("discarding %d bytes of partial record at end of %s", len(tail), self.path)
            with open(self.path, "r+", encoding="utf-8", newline="\n") as fh:
                fh.truncate(len(data.encode("utf-8")) - len(tail.encode("utf-8")))
        entries = []
        for n, line in enumerate(lines, 1):
            prefix, sep, body = line.partition("\t")
            if not sep or not prefix.startswith("iport=") or not valid_segment(prefix[6:]):
                raise StoreUnavailable(f"{self.path}:{n}: malformed store line")
            try:
                entries.append((prefix[6:], DataRecord.from_canonical(body)))
            except InvalidRecord as e:
                raise StoreUnavailable(f"{self.path}:{n}: {e}") from None
        self._entries = tuple(entries)

    def append(self, iport: str, records: Iterable[DataRecord]) -> None:
        records = list(records)
        text = "".join(f"iport={iport}\t{r.canonical()}\n" for r in records)
        with self._lock:
            try:
                self._fh.write(text)
                self._fh.flush()
                if self._fsync:
                    os.fsync(self._fh.fileno())
            except OSError as e:
                raise StoreUnavailable(f"write to {self.path} failed: {e}") from e
            self._entries = self._entries + tuple((iport, r) for r in records)

    def close(self) -> None:
        self._fh.close()


def open_store(config: StoreConfig):
    if config.backend == "file":
        return FileStore(config.path)
    return MemoryStore()
