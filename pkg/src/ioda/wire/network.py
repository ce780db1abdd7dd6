"""Connectors: how a gate reaches another gate's server, in-process or over TCP."""

from __future__ import annotations

import threading

from ioda.core_model import GateAddress, format_address
from ioda.errors import TransportClosed
from ioda.wire.transport import SocketTransport, pipe_pair


class InProcNetwork:
    """Every ``connect`` builds a fresh pipe and hands the far end to the target server."""

    kind = "inproc"

    def __init__(self):
        self._servers: dict = {}
        self._lock = threading.Lock()

    def add(self, server) -> None:
        with self._lock:
            self._servers[format_address(server.gate.address)] = server

    def connect(self, address: GateAddress):
        name = format_address(address.gate_address)
        server = self._servers.get(name)
        if server is None:
            raise TransportClosed(f"no server for {name}")
        near, far = pipe_pair(f"inproc:{name}")
        server.serve(far)
        return near

    def close(self) -> None:
        with self._lock:
            servers, self._servers = list(self._servers.values()), {}
        for s in servers:
            s.close()


class TcpNetwork:
    """One localhost listener per gate server."""

    kind = "tcp"

    def __init__(self, host: str = "127.0.0.1"):
        self.host = host
        self._servers: dict = {}
        self.ports: dict = {}

    def add(self, server) -> None:
        name = format_address(server.gate.address)
        _, port = server.listen_tcp(self.host, 0)
        self._servers[name] = server
        self.ports[name] = port

    def connect(self, address: GateAddress):
        name = format_address(address.gate_address)
        port = self.ports.get(name)
        if port is None:
            raise TransportClosed(f"no listener for {name}")
        return SocketTransport.connect(self.host, port)

    def close(self) -> None:
        servers, self._servers = list(self._servers.values()), {}
        for s in servers:
            s.close()


def make_network(kind: str):
    if kind == "inproc":
        return InProcNetwork()
    if kind == "tcp":
        return TcpNetwork()
    raise ValueError(f"unknown transport {kind!r}")
