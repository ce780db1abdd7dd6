"""Reliable ordered byte streams: an in-process pipe and TCP sockets."""

from __future__ import annotations

import socket
import threading
from typing import Optional, Tuple

from ioda.errors import TransportClosed


class _Pipe:
    def __init__(self):
        self.buf = bytearray()
        self.cond = threading.Condition()
        self.eof = False


class PipeTransport:
    """One end of an in-process duplex pipe. Build pairs with :func:`pipe_pair`."""

    def __init__(self, inbound: _Pipe, outbound: _Pipe, name: str = "pipe"):
        self._in = inbound
        self._out = outbound
        self.name = name
        self.aborted = False
        self.peer: Optional["PipeTransport"] = None

    def send(self, data: bytes) -> None:
        with self._out.cond:
            if self._out.eof or self.aborted:
                raise TransportClosed(f"{self.name}: send on closed pipe")
            self._out.buf.extend(data)
            self._out.cond.notify_all()

    def recv(self, n: int, timeout: Optional[float] = None) -> bytes:
        """Up to ``n`` bytes; ``b""`` at end of stream. Raises TimeoutError on timeout."""
        with self._in.cond:
            if not self._in.cond.wait_for(lambda: self._in.buf or self._in.eof, timeout):
                raise TimeoutError(f"{self.name}: recv timed out")
            if self.aborted:
                raise TransportClosed(f"{self.name}: transport aborted")
            chunk = bytes(self._in.buf[:n])
            del self._in.buf[:n]
            return chunk

    def close(self) -> None:
        """Graceful close: the peer can still drain what was already sent."""
        for pipe in (self._out, self._in):
            with pipe.cond:
                pipe.eof = True
                pipe.cond.notify_all()

    def abort(self) -> None:
        """Hard failure: both directions die and in-flight bytes are lost."""
        self.aborted = True
        if self.peer is not None:
            self.peer.aborted = True
        for pipe in (self._out, self._in):
            with pipe.cond:
                pipe.buf.clear()
                pipe.eof = True
                pipe.cond.notify_all()


def pipe_pair(name: str = "pipe") -> Tuple[PipeTransport, PipeTransport]:
    ab, ba = _Pipe(), _Pipe()
    a = PipeTransport(ba, ab, name + ":a")
    b = PipeTransport(ab, ba, name + ":b")
    a.peer, b.peer = b, a
    return a, b


class SocketTransport:
    def __init__(self, sock: socket.socket, name: str = "tcp"):
        self.sock = sock
        self.name = name
        self._closed = False
        self._lock = threading.Lock()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "SocketTransport":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise TransportClosed(f"cannot connect to {host}:{port}: {e}") from e
        sock.settimeout(None)
        return cls(sock, f"tcp:{host}:{port}")

    def send(self, data: bytes) -> None:
        if self._closed:
            raise TransportClosed(f"{self.name}: send on closed socket")
        try:
            with self._lock:
                self.sock.sendall(data)
        except OSError as e:
            raise TransportClosed(f"{self.name}: {e}") from e

    def recv(self, n: int, timeout: Optional[float] = None) -> bytes:
        if self._closed:
            raise TransportClosed(f"{self.name}: recv on closed socket")
        try:
            self.sock.settimeout(timeout)
            return self.sock.recv(n)
        except socket.timeout:
            raise TimeoutError(f"{self.name}: recv timed out") from None
        except OSError as e:
            if self._closed:
                raise TransportClosed(f"{self.name}: closed") from e
            raise TransportClosed(f"{self.name}: {e}") from e

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    abort = close


class TcpListener:
    """Accept loop handing each connection to ``on_connect`` on its own thread."""

    def __init__(self, on_connect, host: str = "127.0.0.1", port: int = 0):
        self._on_connect = on_connect
        self._sock = socket.create_server((host, port))
        self.host, self.port = self._sock.getsockname()[:2]
        self._closed = False
        self._thread = threading.Thread(target=self._loop, name=f"listen:{self.port}", daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        while not self._closed:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            self._on_connect(SocketTransport(conn, f"tcp-in:{self.port}"))

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._thread.join(timeout=2)
