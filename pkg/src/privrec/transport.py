"""Framed stream transport for the private recommendation protocol.

Frame layout, big-endian throughout:

    4 bytes  payload length
    1 byte   message type        (see protocol.messages.MessageType)
    4 bytes  session id
    N bytes  payload

An empty-payload frame is exactly 9 bytes.  One TCP connection carries
one or more sessions; the client picks the session id and the server
keeps per-id state, so interleaved sessions never share tables.  A
malformed frame draws an ERROR frame and closes that connection; the
server itself keeps serving.
"""

from __future__ import annotations

import os
import random
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from typing import BinaryIO, Optional, Sequence

from .protocol.messages import MessageType
from .protocol.session import (
    ClientSession,
    ProtocolError,
    ServerConfig,
    ServerEngine,
)
from .rules import RecommendationList, RuleDatabase

_HEADER = struct.Struct(">IBI")

MAX_PAYLOAD = 64 * 1024 * 1024

DEFAULT_PORT = 7433
PORT_ENV_VAR = "PRIVREC_PORT"


def default_port() -> int:
    return int(os.environ.get(PORT_ENV_VAR, DEFAULT_PORT))


class FrameError(ValueError):
    """Raised on truncated, oversized, or unknown-type frames."""


@dataclass(frozen=True)
class Frame:
    mtype: int
    session_id: int
    payload: bytes

    def __post_init__(self):
        if self.mtype not in MessageType._value2member_map_:
            raise FrameError(f"unknown message type {self.mtype}")
        if len(self.payload) > MAX_PAYLOAD:
            raise FrameError("payload exceeds the frame cap")
        if not (0 <= self.session_id < 1 << 32):
            raise FrameError("session id out of range")


def encode_frame(frame: Frame) -> bytes:
    return _HEADER.pack(len(frame.payload), frame.mtype, frame.session_id) + frame.payload


def decode_frame(data: bytes) -> Frame:
    if len(data) < _HEADER.size:
        raise FrameError("frame shorter than its header")
    length, mtype, session_id = _HEADER.unpack_from(data, 0)
    if len(data) != _HEADER.size + length:
        raise FrameError("frame length field disagrees with the data")
    if length > MAX_PAYLOAD:
        raise FrameError("payload exceeds the frame cap")
    return Frame(mtype, session_id, data[_HEADER.size :])


def _read_exact(stream: BinaryIO, count: int) -> Optional[bytes]:
    """count bytes, or None on a clean EOF at a frame boundary."""
    out = b""
    while len(out) < count:
        chunk = stream.read(count - len(out))
        if not chunk:
            if out:
                raise FrameError("stream truncated inside a frame")
            return None
        out += chunk
    return out


def read_frame(stream: BinaryIO) -> Optional[Frame]:
    header = _read_exact(stream, _HEADER.size)
    if header is None:
        return None
    length, mtype, session_id = _HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise FrameError("payload exceeds the frame cap")
    payload = _read_exact(stream, length) if length else b""
    if length and payload is None:
        raise FrameError("stream truncated inside a frame")
    return Frame(mtype, session_id, payload or b"")


def write_frame(stream: BinaryIO, frame: Frame) -> None:
    stream.write(encode_frame(frame))
    stream.flush()


class _Handler(socketserver.StreamRequestHandler):
    """One connection: a loop of request frames dispatched to per-id
    server sessions."""

    def handle(self) -> None:
        sessions: dict[int, object] = {}
        engine: ServerEngine = self.server.engine
        while True:
            try:
                frame = read_frame(self.rfile)
            except FrameError as e:
                self._bail(str(e))
                return
            if frame is None:
                return
            session = sessions.get(frame.session_id)
            if session is None:
                session = engine.new_session()
                sessions[frame.session_id] = session
            mtype, payload = session.handle(frame.mtype, frame.payload)
            write_frame(self.wfile, Frame(mtype, frame.session_id, payload))

    def _bail(self, reason: str) -> None:
        try:
            write_frame(self.wfile, Frame(int(MessageType.ERROR), 0, reason.encode()))
        except (OSError, ValueError):
            pass


class RecommendationServer(socketserver.ThreadingTCPServer):
    """Serves one rule database; every connection gets isolated sessions
    borrowing the shared engine (read-only database, one key pair)."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], engine: ServerEngine):
        super().__init__(address, _Handler)
        self.engine = engine

    @property
    def port(self) -> int:
        return self.server_address[1]


def run_server(
    address: tuple[str, int],
    db: RuleDatabase,
    config: ServerConfig = ServerConfig(),
    *,
    engine: Optional[ServerEngine] = None,
    rsa_bits: int = 1024,
    background: bool = False,
) -> RecommendationServer:
    """Bind and serve.  background=True serves from a daemon thread and
    returns immediately (tests); otherwise blocks until shutdown()."""
    server = RecommendationServer(
        address, engine or ServerEngine(db, config, rsa_bits=rsa_bits)
    )
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
        return server
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return server


class TcpChannel:
    """Client side of the frame stream; satisfies the channel interface
    the protocol driver expects."""

    def __init__(self, address: tuple[str, int], session_id: Optional[int] = None):
        self.sock = socket.create_connection(address)
        self.rfile = self.sock.makefile("rb")
        self.wfile = self.sock.makefile("wb")
        self.session_id = (
            session_id if session_id is not None else random.getrandbits(32)
        )

    def request(self, mtype: int, payload: bytes) -> tuple[int, bytes]:
        write_frame(self.wfile, Frame(mtype, self.session_id, payload))
        reply = read_frame(self.rfile)
        if reply is None:
            raise ProtocolError("server closed the connection mid-exchange")
        if reply.session_id != self.session_id:
            raise ProtocolError("reply for a different session")
        return reply.mtype, reply.payload

    def close(self) -> None:
        for f in (self.rfile, self.wfile):
            try:
                f.close()
            except OSError:
                pass
        self.sock.close()


def run_client(
    address: tuple[str, int],
    transaction: Sequence[int],
    *,
    mode: str = "exact",
    w: int = 0,
    t: Optional[int] = None,
    cap: Optional[int] = None,
    rsa_bits: int = 1024,
    seed: Optional[int] = None,
) -> RecommendationList:
    """Connect, run one private query, tear the session down."""
    channel = TcpChannel(address)
    client = ClientSession(channel, mode=mode, rsa_bits=rsa_bits, seed=seed)
    try:
        client.open()
        client.anonymize(transaction)
        if mode == "approx":
            return client.approx_query(cap=cap)
        return client.all_assoc(w=w, t=t, cap=cap)
    finally:
        client.close()
