"""Authenticated wires between gates."""

from ioda.wire.frames import FRAME_TYPES, MAX_FRAME, Frame, FrameDecoder, decode, encode, read_frame, write_frame
from ioda.wire.identity import GateIdentity, GateKeys, verify_signature
from ioda.wire.network import InProcNetwork, TcpNetwork, make_network
from ioda.wire.session import (
    GateServer,
    RemoteRegistry,
    RemoteSubscription,
    WireClient,
    WireSession,
    accept,
    establish,
    remote_query,
    remote_subscribe,
)
from ioda.wire.trace import TRACE
from ioda.wire.transport import PipeTransport, SocketTransport, pipe_pair

__all__ = [
    "FRAME_TYPES",
    "MAX_FRAME",
    "TRACE",
    "Frame",
    "FrameDecoder",
    "GateIdentity",
    "GateKeys",
    "GateServer",
    "InProcNetwork",
    "PipeTransport",
    "RemoteRegistry",
    "RemoteSubscription",
    "SocketTransport",
    "TcpNetwork",
    "WireClient",
    "WireSession",
    "accept",
    "decode",
    "encode",
    "establish",
    "make_network",
    "pipe_pair",
    "read_frame",
    "remote_query",
    "remote_subscribe",
    "verify_signature",
    "write_frame",
]
