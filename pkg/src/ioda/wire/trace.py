"""Process-wide frame trace with an online "no data before auth" validator.

Sessions report every frame they send, and every frame they receive along
with whether it was acted on. A violation is a data frame that an endpoint
sent, or accepted, on a session before that endpoint completed mutual
authentication on it.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from ioda.wire.frames import DATA_TYPES


@dataclass(frozen=True)
class TraceViolation:
    sid: str
    role: str
    direction: str
    type: str


class FrameTrace:
    def __init__(self):
        self._lock = threading.Lock()
        self._open: set = set()
        self.violations: list = []
        self.frames = 0
        self.data_frames = 0

    def opened(self, sid: str, role: str) -> None:
        with self._lock:
            self._open.add((sid, role))

    def record(self, sid: str, role: str, direction: str, ftype: str, accepted: bool = True) -> None:
        with self._lock:
            self.frames += 1
            if ftype not in DATA_TYPES or not accepted:
                return
            self.data_frames += 1
            if (sid, role) not in self._open:
                self.violations.append(TraceViolation(sid, role, direction, ftype))

    def reset(self) -> None:
        with self._lock:
            self._open.clear()
            self.violations = []
            self.frames = 0
            self.data_frames = 0


TRACE = FrameTrace()
