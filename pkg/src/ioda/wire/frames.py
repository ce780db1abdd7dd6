"""Frame codec: ``len (4 bytes, big-endian) || UTF-8 JSON {"t", "sid", "body"}``."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from ioda.core_model import canonical_json
from ioda.errors import ProtocolViolation, TransportClosed

MAX_FRAME = 16 * 1024 * 1024

FRAME_TYPES = (
    "HELLO",
    "CHALLENGE",
    "AUTH",
    "OPEN",
    "QUERY",
    "RESULT",
    "SUBSCRIBE",
    "EVENT",
    "ACK",
    "RESOLVE",
    "RESOLVED",
    "ERROR",
    "BYE",
)
HANDSHAKE_TYPES = frozenset({"HELLO", "CHALLENGE", "AUTH", "OPEN"})
DATA_TYPES = frozenset({"QUERY", "RESULT", "SUBSCRIBE", "EVENT", "ACK", "RESOLVE", "RESOLVED"})

_HEADER = struct.Struct("!I")


@dataclass(frozen=True)
class Frame:
    type: str
    sid: str
    body: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.type not in FRAME_TYPES:
            raise ProtocolViolation(f"unknown frame type {self.type!r}")
        if not isinstance(self.sid, str):
            raise ProtocolViolation("frame sid must be a string")
        if not isinstance(self.body, dict):
            raise ProtocolViolation("frame body must be an object")


def encode(frame: Frame, max_frame: int = MAX_FRAME) -> bytes:
    raw = canonical_json({"t": frame.type, "sid": frame.sid, "body": frame.body}).encode("utf-8")
    if len(raw) > max_frame:
        raise ProtocolViolation(f"frame of {len(raw)} bytes exceeds the {max_frame} byte cap")
    return _HEADER.pack(len(raw)) + raw


def encoded_size(frame: Frame) -> int:
    return _HEADER.size + len(canonical_json({"t": frame.type, "sid": frame.sid, "body": frame.body}).encode("utf-8"))


def decode_body(raw: bytes) -> Frame:
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolViolation(f"frame body is not UTF-8 JSON: {e}") from None
    if not isinstance(obj, dict) or set(obj) != {"t", "sid", "body"}:
        raise ProtocolViolation("frame must be an object with exactly t, sid and body")
    return Frame(obj["t"], obj["sid"], obj["body"])


def decode(data: bytes, max_frame: int = MAX_FRAME) -> Frame:
    """Decode exactly one frame; trailing or missing bytes are a violation."""
    dec = FrameDecoder(max_frame)
    frames = dec.feed(data)
    dec.finish()
    if len(frames) != 1:
        raise ProtocolViolation(f"expected one frame, found {len(frames)}")
    return frames[0]


class FrameDecoder:
    """Incremental decoder; nothing is yielded until a frame is complete."""

    def __init__(self, max_frame: int = MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= _HEADER.size:
            (n,) = _HEADER.unpack_from(self._buf)
            if n > self.max_frame:
                raise ProtocolViolation(f"announced frame length {n} exceeds the {self.max_frame} byte cap")
            if len(self._buf) < _HEADER.size + n:
                break
            raw = bytes(self._buf[_HEADER.size : _HEADER.size + n])
            del self._buf[: _HEADER.size + n]
            out.append(decode_body(raw))
        return out

    def finish(self) -> None:
        if self._buf:
            raise ProtocolViolation(f"stream ended inside a frame ({len(self._buf)} bytes pending)")


def _read_exact(transport, n: int, timeout, at_boundary: bool) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = transport.recv(n - len(buf), timeout)
        if not chunk:
            if at_boundary and not buf:
                raise TransportClosed("peer closed the stream")
            raise ProtocolViolation(f"stream ended inside a frame ({len(buf)}/{n} bytes)")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(transport, timeout=None, max_frame: int = MAX_FRAME) -> Frame:
    header = _read_exact(transport, _HEADER.size, timeout, at_boundary=True)
    (n,) = _HEADER.unpack(header)
    if n > max_frame:
        raise ProtocolViolation(f"announced frame length {n} exceeds the {max_frame} byte cap")
    return decode_body(_read_exact(transport, n, timeout, at_boundary=False))


def write_frame(transport, frame: Frame, max_frame: int = MAX_FRAME) -> None:
    transport.send(encode(frame, max_frame))
