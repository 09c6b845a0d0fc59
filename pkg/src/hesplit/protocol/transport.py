"""Duplex byte-stream transports carrying length-prefixed frames.

``PipeTransport`` connects two endpoints inside one process; ``TcpTransport``
wraps a socket. Both move whole frames, count bytes in each direction, and are
driven by one reader and one writer per side. ``Channel`` adds the session id
and per-direction sequence numbers on top.
"""

from __future__ import annotations

import queue
import socket
import time
from abc import ABC, abstractmethod

from .messages import FRAME_HEADER, Message, MsgType, ProtocolError, decode_frame


class Transport(ABC):
    bytes_sent: int = 0
    bytes_received: int = 0

    @abstractmethod
    def send_frame(self, frame: bytes) -> None: ...

    @abstractmethod
    def recv_frame(self, timeout: float | None = None) -> bytes: ...

    def close(self) -> None:
        pass


class PipeTransport(Transport):
    """One end of an in-process duplex pipe."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._in, self._out = inbox, outbox
        self.bytes_sent = self.bytes_received = 0
        self._closed = False

    @classmethod
    def pair(cls) -> tuple[PipeTransport, PipeTransport]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise ProtocolError("transport closed")
        self._out.put(bytes(frame))
        self.bytes_sent += len(frame)

    def recv_frame(self, timeout: float | None = None) -> bytes:
        try:
            frame = self._in.get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError(f"no frame within {timeout} s") from None
        if frame is None:
            raise ProtocolError("peer closed the pipe")
        self.bytes_received += len(frame)
        return frame

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._out.put(None)


class TcpTransport(Transport):
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.bytes_sent = self.bytes_received = 0

    @classmethod
    def connect(cls, host: str, port: int, retry_for: float = 30.0) -> TcpTransport:
        deadline = time.monotonic() + retry_for
        while True:
            try:
                return cls(socket.create_connection((host, port)))
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.2)

    @classmethod
    def listen(cls, host: str, port: int, timeout: float | None = None) -> TcpTransport:
        with socket.create_server((host, port)) as srv:
            srv.settimeout(timeout)
            conn, _ = srv.accept()
        conn.settimeout(None)
        return cls(conn)

    def send_frame(self, frame: bytes) -> None:
        self.sock.sendall(frame)
        self.bytes_sent += len(frame)

    def _read(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            chunk = self.sock.recv(min(n - got, 1 << 20))
            if not chunk:
                raise ProtocolError(f"connection closed after {got} of {n} bytes")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv_frame(self, timeout: float | None = None) -> bytes:
        self.sock.settimeout(timeout)
        try:
            head = self._read(FRAME_HEADER.size)
            length = FRAME_HEADER.unpack(head)[0]
            frame = head + self._read(length)
        except socket.timeout:
            raise ProtocolError(f"no frame within {timeout} s") from None
        self.bytes_received += len(frame)
        return frame

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


class Channel:
    """Session-scoped messaging with strictly increasing sequence numbers."""

    def __init__(self, transport: Transport, session: int | None, timeout: float | None = None):
        """``session=None`` adopts the id of the first received frame (server side)."""
        self.transport = transport
        self.session = session
        self.timeout = timeout
        self._next_seq = 0
        self._last_in = -1

    def send(self, mtype: MsgType, meta: dict | None = None, blobs: list[bytes] | None = None) -> None:
        if self.session is None:
            raise ProtocolError("session id not established")
        msg = Message(mtype, meta or {}, list(blobs or []), self.session, self._next_seq)
        self._next_seq += 1
        self.transport.send_frame(msg.encode())

    def recv(self, *expected: MsgType) -> Message:
        msg = decode_frame(self.transport.recv_frame(self.timeout))
        if self.session is None:
            self.session = msg.session
        if msg.session != self.session:
            raise ProtocolError(f"session id {msg.session} != {self.session}")
        if msg.seq <= self._last_in:
            raise ProtocolError(f"sequence number {msg.seq} not above {self._last_in}")
        self._last_in = msg.seq
        if msg.type == MsgType.SHUTDOWN and MsgType.SHUTDOWN not in expected and msg.meta.get("error"):
            raise ProtocolError(f"peer aborted: {msg.meta['error']}")
        if expected and msg.type not in expected:
            names = ", ".join(e.name for e in expected)
            raise ProtocolError(f"expected {names}, got {msg.type.name}")
        return msg

    @property
    def bytes_sent(self) -> int:
        return self.transport.bytes_sent

    @property
    def bytes_received(self) -> int:
        return self.transport.bytes_received
