"""Message channels: deterministic in-process queues and TCP sockets.

Both carry the exact frame bytes produced by ``protocol.encode_message``;
the in-process variant just moves those bytes through FIFO queues.
"""

from __future__ import annotations

import queue
import socket
import threading
from typing import Callable, Optional

from .protocol import HEADER, MAX_FRAME, FedMessage, WireError, decode_message, decode_payload, encode_message


class TransportError(ConnectionError):
    pass


class PeerClosed(TransportError):
    pass


class ChannelError(TransportError):
    """A frame arrived but could not be decoded; the channel is unusable afterwards."""


_CLOSED = object()


class InProcChannel:
    """One end of an in-memory duplex link."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, tap: Optional[Callable[[bytes], None]] = None):
        self._inbox = inbox
        self._outbox = outbox
        self._tap = tap
        self._closed = False

    def send(self, msg: FedMessage) -> None:
        self.send_frame(encode_message(msg))

    def send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise PeerClosed("channel closed")
        if self._tap is not None:
            self._tap(frame)
        self._outbox.put(frame)

    def receive(self, timeout: Optional[float] = None) -> FedMessage:
        if self._closed:
            raise PeerClosed("channel closed")
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"receive timed out after {timeout}s") from None
        if frame is _CLOSED:
            self._closed = True
            raise PeerClosed("peer closed the channel")
        try:
            return decode_message(frame)
        except WireError as exc:
            self._closed = True
            raise ChannelError(f"undecodable frame: {exc}") from exc

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def inproc_pair(tap: Optional[Callable[[bytes], None]] = None) -> tuple[InProcChannel, InProcChannel]:
    a, b = queue.Queue(), queue.Queue()
    return InProcChannel(a, b, tap), InProcChannel(b, a, tap)


class InProcListener:
    """Server-side rendezvous for in-process clients."""

    def __init__(self, tap: Optional[Callable[[bytes], None]] = None):
        self._pending: queue.Queue = queue.Queue()
        self._tap = tap

    def connect(self) -> InProcChannel:
        server_end, client_end = inproc_pair(self._tap)
        self._pending.put(server_end)
        return client_end

    def accept(self, n: int, timeout: Optional[float] = None) -> list[InProcChannel]:
        out = []
        for _ in range(n):
            try:
                out.append(self._pending.get(timeout=timeout))
            except queue.Empty:
                raise TransportError("timed out waiting for federates") from None
        return out

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise PeerClosed("connection closed mid-frame")
            raise PeerClosed("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


class TcpChannel:
    def __init__(self, sock: socket.socket, max_frame: int = MAX_FRAME):
        self._sock = sock
        self._max = max_frame
        self._send_lock = threading.Lock()
        self._closed = False
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, msg: FedMessage) -> None:
        self.send_frame(encode_message(msg))

    def send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise PeerClosed("channel closed")
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise PeerClosed(f"send failed: {exc}") from exc

    def receive(self, timeout: Optional[float] = None) -> FedMessage:
        if self._closed:
            raise PeerClosed("channel closed")
        self._sock.settimeout(timeout)
        try:
            length, tag = HEADER.unpack(_recv_exact(self._sock, HEADER.size))
            if length > self._max:
                raise ChannelError(f"frame length {length} exceeds cap {self._max}")
            payload = _recv_exact(self._sock, length)
        except socket.timeout:
            raise TransportError(f"receive timed out after {timeout}s") from None
        except ChannelError:
            self.close()
            raise
        except OSError as exc:
            if isinstance(exc, TransportError):
                raise
            raise PeerClosed(f"receive failed: {exc}") from exc
        try:
            return decode_payload(tag, payload)
        except WireError as exc:
            self.close()
            raise ChannelError(f"undecodable frame: {exc}") from exc

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.create_server((host, port), reuse_port=False)
        self._sock.listen()

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def accept(self, n: int, timeout: Optional[float] = None) -> list[TcpChannel]:
        self._sock.settimeout(timeout)
        out = []
        try:
            for _ in range(n):
                conn, _ = self._sock.accept()
                conn.settimeout(None)
                out.append(TcpChannel(conn))
        except socket.timeout:
            for ch in out:
                ch.close()
            raise TransportError("timed out waiting for federates") from None
        return out

    def close(self) -> None:
        self._sock.close()


def tcp_connect(host: str, port: int, timeout: Optional[float] = 10.0) -> TcpChannel:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.settimeout(None)
    return TcpChannel(sock)


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)
