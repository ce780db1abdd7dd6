"""Authenticated sessions between gates, and the client / server ends of a wire.

Handshake (initiator ``I``, responder ``R``)::

    I -> R  HELLO      {from: I, to: R, nonce: nI}
    R -> I  CHALLENGE  {from: R, nonce: nR}
    I -> R  AUTH       {sig: sign_I(transcript("initiator"))}
    R -> I  AUTH       {sig: sign_R(transcript("responder"))}
    I -> R  OPEN
    R -> I  OPEN

The transcript binds the session id, both addresses and both nonces, so an
AUTH captured from one session never verifies in another. Any failure ends
the session with ``ERROR {code: AuthFailed}``.
"""

from __future__ import annotations

import logging
import queue
import secrets
import threading
import uuid
from typing import Callable, Optional

from ioda.core_model import (
    DataRecord,
    GateAddress,
    GateMetadata,
    Principal,
    canonical_json,
    format_address,
    parse_address,
)
from ioda.dataflow import Filter, operator_from_json
from ioda.errors import (
    AuthFailed,
    IodaError,
    MalformedAddress,
    NotFound,
    ProtocolViolation,
    SessionClosed,
    TransportClosed,
    error_from_code,
)
from ioda.gate import Gate, ViewEvent
from ioda.resolution import Selector
from ioda.wire.frames import DATA_TYPES, MAX_FRAME, Frame, encoded_size, read_frame, write_frame
from ioda.wire.identity import GateIdentity, GateKeys, verify_signature
from ioda.wire.trace import TRACE

log = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT = 10.0
REQUEST_TIMEOUT = 30.0

IdentityLookup = Callable[[GateAddress], Optional[bytes]]


def transcript(sid: str, initiator: str, responder: str, ni: str, nr: str, role: str) -> bytes:
    return canonical_json(
        {"sid": sid, "initiator": initiator, "responder": responder, "ni": ni, "nr": nr, "role": role}
    ).encode("utf-8")


class WireSession:
    """One side of an authenticated frame stream."""

    def __init__(self, sid: str, role: str, keys: GateKeys, transport, max_frame: int = MAX_FRAME):
        self.sid = sid
        self.role = role
        self.keys = keys
        self.local = keys.identity
        self.remote: Optional[GateIdentity] = None
        self.transport = transport
        self.max_frame = max_frame
        self.state = "handshaking"
        self.nonces = ("", "")
        self._send_lock = threading.Lock()

    @property
    def is_open(self) -> bool:
        return self.state == "open"

    def send(self, ftype: str, body: Optional[dict] = None) -> None:
        if ftype in DATA_TYPES and not self.is_open:
            raise SessionClosed(f"session {self.sid} is {self.state}; cannot send {ftype}")
        frame = Frame(ftype, self.sid, body or {})
        with self._send_lock:
            if self.state == "closed":
                raise SessionClosed(f"session {self.sid} is closed")
            write_frame(self.transport, frame, self.max_frame)
        TRACE.record(self.sid, self.role, "send", ftype)

    def recv(self, timeout: Optional[float] = None) -> Frame:
        try:
            frame = read_frame(self.transport, timeout, self.max_frame)
        except TimeoutError:
            raise TransportClosed(f"session {self.sid}: peer went silent") from None
        if frame.sid != self.sid:
            raise ProtocolViolation(f"frame for session {frame.sid!r} arrived on {self.sid!r}")
        return frame

    def mark_open(self) -> None:
        self.state = "open"
        TRACE.opened(self.sid, self.role)

    def fail(self, code: str, message: str) -> None:
        """Send ERROR if possible, then close."""
        try:
            with self._send_lock:
                write_frame(self.transport, Frame("ERROR", self.sid, {"code": code, "message": message}))
            TRACE.record(self.sid, self.role, "send", "ERROR")
        except (IodaError, OSError):
            pass
        self.close(bye=False)

    def close(self, bye: bool = True) -> None:
        if self.state == "closed":
            return
        if bye and self.is_open:
            try:
                self.send("BYE")
            except (IodaError, OSError):
                pass
        self.state = "closed"
        self.transport.close()

    def abort(self) -> None:
        self.state = "closed"
        abort = getattr(self.transport, "abort", self.transport.close)
        abort()


def _expect(session: WireSession, ftype: str, timeout: float) -> Frame:
    frame = session.recv(timeout)
    if frame.type == "ERROR":
        code = frame.body.get("code", "")
        if code == "AuthFailed":
            raise AuthFailed(frame.body.get("message", "peer rejected authentication"))
        raise ProtocolViolation(f"peer aborted handshake: {code} {frame.body.get('message', '')}")
    if frame.type != ftype:
        TRACE.record(session.sid, session.role, "recv", frame.type, accepted=False)
        raise ProtocolViolation(f"expected {ftype} during handshake, got {frame.type}")
    TRACE.record(session.sid, session.role, "recv", frame.type)
    return frame


def _sig(frame: Frame) -> bytes:
    try:
        return bytes.fromhex(frame.body["sig"])
    except (KeyError, TypeError, ValueError):
        raise ProtocolViolation("AUTH frame lacks a hex signature") from None


def establish(
    keys: GateKeys,
    transport,
    remote_addr: GateAddress,
    identity_lookup: IdentityLookup,
    timeout: float = HANDSHAKE_TIMEOUT,
    max_frame: int = MAX_FRAME,
) -> WireSession:
    """Initiator side of the mutual challenge-response handshake."""
    remote_addr = remote_addr.gate_address
    session = WireSession(uuid.uuid4().hex, "client", keys, transport, max_frame)
    me, them = format_address(keys.address), format_address(remote_addr)
    ni = secrets.token_hex(32)
    try:
        session.send("HELLO", {"from": me, "to": them, "nonce": ni})
        challenge = _expect(session, "CHALLENGE", timeout)
        nr = challenge.body.get("nonce")
        if challenge.body.get("from") != them or not isinstance(nr, str) or len(nr) != 64:
            raise AuthFailed(f"challenge did not come from {them}")
        session.nonces = (ni, nr)
        sig = keys.sign(transcript(session.sid, me, them, ni, nr, "initiator"))
        session.send("AUTH", {"sig": sig.hex()})
        reply = _expect(session, "AUTH", timeout)
        key = identity_lookup(remote_addr)
        if key is None:
            raise AuthFailed(f"no registered identity for {them}")
        if not verify_signature(key, _sig(reply), transcript(session.sid, me, them, ni, nr, "responder")):
            raise AuthFailed(f"{them} failed to prove its identity")
        session.remote = GateIdentity(remote_addr, key)
        session.send("OPEN")
        _expect(session, "OPEN", timeout)
    except AuthFailed as e:
        session.fail("AuthFailed", str(e))
        raise
    except ProtocolViolation as e:
        session.fail("ProtocolViolation", str(e))
        raise
    except (TransportClosed, SessionClosed, OSError) as e:
        session.abort()
        raise TransportClosed(f"handshake with {them} interrupted: {e}") from None
    session.mark_open()
    return session


def accept(
    keys: GateKeys,
    transport,
    identity_lookup: IdentityLookup,
    timeout: float = HANDSHAKE_TIMEOUT,
    max_frame: int = MAX_FRAME,
) -> WireSession:
    """Responder side of the handshake."""
    try:
        hello = read_frame(transport, timeout, max_frame)
    except TimeoutError:
        transport.close()
        raise TransportClosed("no HELLO received") from None
    except ProtocolViolation:
        transport.close()
        raise
    session = WireSession(hello.sid, "server", keys, transport, max_frame)
    me = format_address(keys.address)
    try:
        if hello.type != "HELLO":
            TRACE.record(session.sid, "server", "recv", hello.type, accepted=False)
            raise ProtocolViolation(f"expected HELLO, got {hello.type}")
        TRACE.record(session.sid, "server", "recv", "HELLO")
        if not hello.sid:
            raise ProtocolViolation("HELLO needs a session id")
        try:
            peer = parse_address(hello.body.get("from", ""))
        except MalformedAddress:
            raise AuthFailed("HELLO carries no valid gate address") from None
        if hello.body.get("to") != me:
            raise AuthFailed(f"HELLO addressed to {hello.body.get('to')!r}, not {me}")
        ni = hello.body.get("nonce")
        if not isinstance(ni, str) or len(ni) != 64:
            raise ProtocolViolation("HELLO nonce must be 32 hex-encoded bytes")
        nr = secrets.token_hex(32)
        session.nonces = (ni, nr)
        session.send("CHALLENGE", {"from": me, "nonce": nr})
        auth = _expect(session, "AUTH", timeout)
        key = identity_lookup(peer)
        if key is None:
            raise AuthFailed(f"no registered identity for {format_address(peer)}")
        them = format_address(peer)
        if not verify_signature(key, _sig(auth), transcript(session.sid, them, me, ni, nr, "initiator")):
            raise AuthFailed(f"{them} failed to prove its identity")
        session.remote = GateIdentity(peer, key)
        sig = keys.sign(transcript(session.sid, them, me, ni, nr, "responder"))
        session.send("AUTH", {"sig": sig.hex()})
        _expect(session, "OPEN", timeout)
        session.mark_open()
        session.send("OPEN")
    except AuthFailed as e:
        session.fail("AuthFailed", str(e))
        raise
    except ProtocolViolation as e:
        session.fail("ProtocolViolation", str(e))
        raise
    except (TransportClosed, SessionClosed, OSError) as e:
        session.abort()
        raise TransportClosed(f"handshake interrupted: {e}") from None
    return session


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


class RemoteSubscription:
    """Client view of a SUBSCRIBE stream: gap-checked events plus an ACK cursor."""

    def __init__(self, client: "WireClient", oport: str, principal: Principal, from_seq: int):
        self.client = client
        self.oport = oport
        self.principal = principal
        self.from_seq = from_seq
        self.last_seq = from_seq
        self.acked = from_seq
        self._pending: list = []
        self.error: Optional[Exception] = None

    def _offer(self, ev: ViewEvent) -> None:
        if ev.seq <= self.last_seq:
            return
        if ev.seq != self.last_seq + 1:
            self.error = ProtocolViolation(f"gap in event stream: expected {self.last_seq + 1}, got {ev.seq}")
            return
        self.last_seq = ev.seq
        self._pending.append(ev)

    def get(self, timeout: Optional[float] = None) -> Optional[ViewEvent]:
        """Next undelivered event, or None on timeout."""
        with self.client._cond:
            ok = self.client._cond.wait_for(lambda: self._pending or self.client.closed, timeout)
            if self._pending:
                return self._pending.pop(0)
            if ok and self.client.closed:
                raise SessionClosed("subscription transport is gone")
            return None

    def drain(self) -> list:
        with self.client._cond:
            out, self._pending = self._pending, []
            return out

    def take_epochs(self) -> list:
        """Whole epochs received so far, oldest first; a partial trailing epoch stays queued."""
        with self.client._cond:
            batches: list = []
            i = 0
            while i < len(self._pending):
                end = self._pending[i].epoch_end
                if end > self.last_seq:
                    break
                j = i
                while j < len(self._pending) and self._pending[j].seq <= end:
                    j += 1
                batches.append(self._pending[i:j])
                i = j
            del self._pending[:i]
            return batches

    def ack(self, seq: int) -> None:
        if seq > self.acked:
            self.acked = seq

    def sync(self, timeout: float = REQUEST_TIMEOUT) -> int:
        """Send the ACK cursor, learn the view head, and wait until every event up to it arrived."""
        reply = self.client._request("ACK", {"cursor": self.acked}, ("ACK",), timeout)
        head = reply[0].body["head"]
        with self.client._cond:
            if not self.client._cond.wait_for(
                lambda: self.last_seq >= head or self.client.closed or self.error is not None, timeout
            ):
                raise SessionClosed(f"events up to {head} did not arrive in time")
            if self.error is not None:
                raise self.error
            if self.last_seq < head:
                raise SessionClosed("transport closed before the stream caught up")
        return head


class WireClient:
    """Initiator end of an open session: queries, one subscription, resolution."""

    def __init__(self, session: WireSession):
        self.session = session
        self.sid = session.sid
        self.closed = False
        self._cond = threading.Condition()
        self._responses: "queue.Queue[Optional[Frame]]" = queue.Queue()
        self._req_lock = threading.Lock()
        self._sub: Optional[RemoteSubscription] = None
        self._reader = threading.Thread(target=self._read_loop, name=f"wire-client:{self.sid[:8]}", daemon=True)
        self._reader.start()

    @classmethod
    def connect(cls, keys: GateKeys, transport, remote_addr: GateAddress, identity_lookup: IdentityLookup, **kw):
        return cls(establish(keys, transport, remote_addr, identity_lookup, **kw))

    def _read_loop(self) -> None:
        try:
            while True:
                frame = self.session.recv()
                if frame.type == "EVENT":
                    TRACE.record(self.sid, "client", "recv", "EVENT", accepted=self.session.is_open)
                    with self._cond:
                        if self._sub is not None:
                            self._sub._offer(ViewEvent.from_json(frame.body))
                        self._cond.notify_all()
                    continue
                TRACE.record(self.sid, "client", "recv", frame.type)
                if frame.type == "BYE":
                    break
                self._responses.put(frame)
        except (TransportClosed, ProtocolViolation, IodaError, OSError) as e:
            log.debug("session %s reader stopped: %s", self.sid, e)
        finally:
            with self._cond:
                self.closed = True
                self.session.state = "closed"
                self._cond.notify_all()
            self._responses.put(None)

    def _request(self, ftype: str, body: dict, expect: tuple, timeout: float = REQUEST_TIMEOUT) -> list:
        """Send one request and collect its reply frames (RESULT pages until ``more`` is false)."""
        with self._req_lock:
            if self.closed:
                raise SessionClosed(f"session {self.sid} is closed")
            try:
                self.session.send(ftype, body)
            except TransportClosed as e:
                raise SessionClosed(str(e)) from None
            frames = []
            while True:
                try:
                    frame = self._responses.get(timeout=timeout)
                except queue.Empty:
                    raise SessionClosed(f"no reply to {ftype} within {timeout}s") from None
                if frame is None:
                    self._responses.put(None)
                    raise SessionClosed(f"session {self.sid} closed while awaiting {ftype} reply")
                if frame.type == "ERROR":
                    raise error_from_code(frame.body.get("code", ""), frame.body.get("message", ""))
                if frame.type not in expect:
                    raise ProtocolViolation(f"unexpected {frame.type} in reply to {ftype}")
                frames.append(frame)
                if not frame.body.get("more", False):
                    return frames

    def query(self, oport: str, principal: Principal, filter: Optional[Filter] = None) -> list:
        body = {"oport": oport, "principal": principal.to_json(), "filter": filter.to_json() if filter else None}
        pages = self._request("QUERY", body, ("RESULT",))
        return [DataRecord.from_json(r) for page in pages for r in page.body["records"]]

    def subscribe(self, oport: str, principal: Principal, from_seq: int = 0) -> RemoteSubscription:
        sub = RemoteSubscription(self, oport, principal, from_seq)
        with self._cond:
            self._sub = sub
        try:
            self._request("SUBSCRIBE", {"oport": oport, "principal": principal.to_json(), "from_seq": from_seq}, ("ACK",))
        except Exception:
            with self._cond:
                self._sub = None
            raise
        return sub

    def resolve(self, requester: Optional[GateMetadata], sel: Selector) -> GateAddress:
        body = {"selector": sel.to_json(), "requester": requester.to_payload() if requester else None}
        reply = self._request("RESOLVE", body, ("RESOLVED",))
        return parse_address(reply[0].body["address"])

    def close(self) -> None:
        self.session.close()
        self._reader.join(timeout=5)

    def abort(self) -> None:
        """Simulate a transport failure."""
        self.session.abort()
        self._reader.join(timeout=5)


def remote_query(client: WireClient, oport: str, principal: Principal, filter: Optional[Filter] = None) -> list:
    return client.query(oport, principal, filter)


def remote_subscribe(client: WireClient, oport: str, principal: Principal, from_seq: int = 0) -> RemoteSubscription:
    return client.subscribe(oport, principal, from_seq)


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------


class GateServer:
    """Serves a gate's oports (and optionally its domain registry) over wires."""

    def __init__(
        self,
        gate: Gate,
        keys: GateKeys,
        identity_lookup: IdentityLookup,
        registry=None,
        max_frame: int = MAX_FRAME,
    ):
        self.gate = gate
        self.keys = keys
        self.identity_lookup = identity_lookup
        self.registry = registry
        self.max_frame = max_frame
        self._sessions: set = set()
        self._lock = threading.Lock()
        self.auth_failures = 0
        self._listener = None

    def serve(self, transport) -> threading.Thread:
        t = threading.Thread(target=self._run, args=(transport,), name=f"wire-server:{self.gate.name}", daemon=True)
        t.start()
        return t

    def listen_tcp(self, host: str = "127.0.0.1", port: int = 0):
        from ioda.wire.transport import TcpListener

        self._listener = TcpListener(self.serve, host, port)
        return self._listener.host, self._listener.port

    def _run(self, transport) -> None:
        try:
            session = accept(self.keys, transport, self.identity_lookup, max_frame=self.max_frame)
        except AuthFailed:
            self.auth_failures += 1
            return
        except (ProtocolViolation, TransportClosed, OSError):
            return
        with self._lock:
            self._sessions.add(session)
        state = {"sub": None, "pump": None}
        try:
            self._loop(session, state)
        finally:
            if state["sub"] is not None:
                state["sub"].close()
            session.close(bye=False)
            with self._lock:
                self._sessions.discard(session)

    def _loop(self, session: WireSession, state: dict) -> None:
        while True:
            try:
                frame = session.recv()
            except ProtocolViolation as e:
                session.fail("ProtocolViolation", str(e))
                return
            except (TransportClosed, OSError):
                return
            if frame.type == "BYE":
                TRACE.record(session.sid, "server", "recv", "BYE")
                return
            if frame.type not in ("QUERY", "SUBSCRIBE", "ACK", "RESOLVE"):
                TRACE.record(session.sid, "server", "recv", frame.type, accepted=False)
                session.fail("ProtocolViolation", f"unexpected {frame.type} on an open session")
                return
            TRACE.record(session.sid, "server", "recv", frame.type)
            try:
                if frame.type == "QUERY":
                    self._on_query(session, frame.body)
                elif frame.type == "SUBSCRIBE":
                    self._on_subscribe(session, frame.body, state)
                elif frame.type == "ACK":
                    self._on_ack(session, frame.body, state)
                else:
                    self._on_resolve(session, frame.body)
            except (TransportClosed, SessionClosed):
                return
            except IodaError as e:
                session.send("ERROR", {"code": e.code, "message": str(e)})
            except (KeyError, TypeError, ValueError) as e:
                session.send("ERROR", {"code": "ProtocolViolation", "message": f"malformed {frame.type}: {e}"})

    def _on_query(self, session: WireSession, body: dict) -> None:
        principal = Principal.from_json(body["principal"])
        flt = None
        if body.get("filter") is not None:
            flt = operator_from_json(body["filter"])
            if not isinstance(flt, Filter):
                raise ProtocolViolation("query filters must be filter stages")
        records = self.gate.query(body["oport"], principal, flt)
        for page, more in self._paginate(session, [r.to_json() for r in records]):
            session.send("RESULT", {"records": page, "more": more})

    def _paginate(self, session: WireSession, items: list):
        """Split records into RESULT bodies that each fit under the frame cap."""
        overhead = encoded_size(Frame("RESULT", session.sid, {"records": [], "more": False}))
        budget = self.max_frame - overhead
        page: list = []
        used = 0
        pages = []
        for item in items:
            size = len(canonical_json(item).encode("utf-8")) + 1
            if size > budget:
                raise ProtocolViolation(f"record {item['id']} is larger than a frame")
            if page and used + size > budget:
                pages.append(page)
                page, used = [], 0
            page.append(item)
            used += size
        pages.append(page)
        for i, p in enumerate(pages):
            yield p, i < len(pages) - 1

    def _on_subscribe(self, session: WireSession, body: dict, state: dict) -> None:
        principal = Principal.from_json(body["principal"])
        from_seq = int(body.get("from_seq", 0))
        sub = self.gate.watch(body["oport"], principal, from_seq)
        if state["sub"] is not None:
            state["sub"].close()
        state["sub"] = sub
        session.send("ACK", {"cursor": from_seq, "head": self.gate.materialize(sub.oport).head})
        pump = threading.Thread(target=self._pump, args=(session, sub), name=f"wire-pump:{session.sid[:8]}", daemon=True)
        state["pump"] = pump
        pump.start()

    def _pump(self, session: WireSession, sub) -> None:
        while not sub.closed and session.is_open:
            ev = sub.get(timeout=0.25)
            if ev is None:
                continue
            try:
                session.send("EVENT", ev.to_json())
            except (IodaError, OSError):
                sub.close()
                return

    def _on_ack(self, session: WireSession, body: dict, state: dict) -> None:
        sub = state["sub"]
        if sub is None:
            raise ProtocolViolation("ACK without an active subscription")
        sub.ack(int(body.get("cursor", 0)))
        session.send("ACK", {"cursor": sub.acked, "head": self.gate.materialize(sub.oport).head})

    def _on_resolve(self, session: WireSession, body: dict) -> None:
        if self.registry is None:
            raise NotFound(f"{self.gate.name} does not serve resolution")
        sel = Selector.from_json(body["selector"])
        requester = GateMetadata.from_payload(body["requester"]) if body.get("requester") else None
        addr = self.registry.resolve_exported(requester, sel)
        session.send("RESOLVED", {"address": format_address(addr)})

    def close(self) -> None:
        if self._listener is not None:
            self._listener.close()
        with self._lock:
            sessions = list(self._sessions)
        for s in sessions:
            s.abort()


class RemoteRegistry:
    """A peer domain's registry reached over a wire (border resolution)."""

    def __init__(self, open_client: Callable[[], WireClient]):
        self._open_client = open_client

    def resolve_exported(self, requester: Optional[GateMetadata], sel: Selector) -> GateAddress:
        client = self._open_client()
        try:
            return client.resolve(requester, sel)
        finally:
            client.close()
