"""Frame transports: an in-process loopback pair and TCP stream sockets."""
from __future__ import annotations

import queue
import socket
import time

from . import codec


class TransportError(Exception):
    """Connection-level failure, as opposed to a malformed frame."""


class TransportClosedError(TransportError):
    """Use of an endpoint after it was closed locally."""


class ConnectionLostError(TransportError):
    """The peer went away (reset, or closed at a frame boundary)."""


class ConnectError(TransportError):
    """Could not reach the peer at all."""


class Endpoint:
    """One side of a bidirectional frame channel with per-direction byte counters."""

    def __init__(self):
        self.bytes_sent = 0
        self.bytes_received = 0
        self.frames_sent = 0
        self.frames_received = 0
        self.closed = False

    def _check_open(self):
        if self.closed:
            raise TransportClosedError("endpoint already closed")

    def send_frame(self, frame: bytes) -> None:
        self._check_open()
        self._send(frame)
        self.bytes_sent += len(frame)
        self.frames_sent += 1

    def recv_frame(self) -> bytes:
        self._check_open()
        frame = self._recv()
        self.bytes_received += len(frame)
        self.frames_received += 1
        return frame

    def send(self, msg) -> int:
        frame = codec.encode_frame(msg)
        self.send_frame(frame)
        return len(frame)

    def receive(self):
        return codec.decode_frame(self.recv_frame())

    def close(self) -> None:
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class LoopbackEndpoint(Endpoint):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__()
        self._inbox = inbox
        self._outbox = outbox

    def _send(self, frame: bytes) -> None:
        self._outbox.put(bytes(frame))

    def _recv(self) -> bytes:
        item = self._inbox.get()
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise ConnectionLostError("peer closed the loopback channel")
        return item

    def close(self) -> None:
        if not self.closed:
            self._outbox.put(_CLOSED)
        super().close()


def loopback_transport(seed: int = 0) -> tuple[LoopbackEndpoint, LoopbackEndpoint]:
    """Lossless in-order endpoint pair. ``seed`` is accepted for API symmetry; delivery
    is already deterministic."""
    a_to_b, b_to_a = queue.Queue(), queue.Queue()
    return LoopbackEndpoint(b_to_a, a_to_b), LoopbackEndpoint(a_to_b, b_to_a)


class TcpEndpoint(Endpoint):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send(self, frame: bytes) -> None:
        try:
            self.sock.sendall(frame)
        except (BrokenPipeError, ConnectionResetError) as exc:
            raise ConnectionLostError(str(exc)) from exc

    def _read_exact(self, n: int, at_boundary: bool) -> bytes:
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(n - got)
            except ConnectionResetError as exc:
                raise ConnectionLostError(str(exc)) from exc
            if not chunk:
                if at_boundary and got == 0:
                    raise ConnectionLostError("peer closed the connection")
                raise codec.TruncatedFrameError(f"connection closed after {got} of {n} bytes")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _recv(self) -> bytes:
        prefix = self._read_exact(codec.PREFIX.size, at_boundary=True)
        (length,) = codec.PREFIX.unpack(prefix)
        if length - 1 > codec.MAX_PAYLOAD:
            raise codec.FrameTooLargeError(f"frame declares {length - 1} payload bytes")
        return prefix + self._read_exact(length, at_boundary=False)

    def close(self) -> None:
        if not self.closed:
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()
        super().close()


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.create_server((host, port))

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> TcpEndpoint:
        self.sock.settimeout(timeout)
        conn, _ = self.sock.accept()
        conn.settimeout(None)
        return TcpEndpoint(conn)

    def close(self) -> None:
        self.sock.close()


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def tcp_connect(address, timeout: float = 10.0) -> TcpEndpoint:
    """Connect, retrying refused connections until ``timeout`` seconds pass."""
    if isinstance(address, str):
        address = parse_address(address)
    deadline = time.monotonic() + timeout
    while True:
        try:
            return TcpEndpoint(socket.create_connection(address))
        except ConnectionRefusedError as exc:
            if time.monotonic() >= deadline:
                raise ConnectError(f"connection to {address[0]}:{address[1]} refused") from exc
            time.sleep(0.05)
