"""Typed messages between source and target node, their binary framing, and two channels.

Frame layout (all integers little-endian)::

    magic     4 bytes   b"DISN"
    version   uint16
    msg_type  uint8
    length    uint32    payload size in bytes
    payload   length bytes
    crc32     uint32    CRC-32 of the payload

Parameter arrays travel as little-endian float32 in layout order. Only
parameters, a class index, a convergence flag and round counters are ever
encoded; there is no message type that can carry sample data.
"""
from __future__ import annotations

import queue
import socket
import struct
import time
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"DISN"
PROTOCOL_VERSION = 1
HEADER = struct.Struct("<4sHBI")
TRAILER = struct.Struct("<I")

DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 3


class TransportError(Exception):
    pass


class FrameError(TransportError):
    pass


class BadMagic(FrameError):
    pass


class VersionMismatch(FrameError):
    pass


class ChecksumError(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class ProtocolError(TransportError):
    pass


class ConnectError(TransportError):
    pass


class RetryExhausted(TransportError):
    pass


class ChannelClosed(TransportError):
    pass


def _params_array(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError("parameters must be a flat array")
    return arr.astype("<f4", copy=False)


class Message:
    type_id: int = -1

    def payload(self) -> bytes:
        raise NotImplementedError

    def __eq__(self, other):
        return type(self) is type(other) and encode(self) == encode(other)

    def __hash__(self):
        return hash(encode(self))


@dataclass(eq=False)
class InitModel(Message):
    params: np.ndarray
    type_id = 1

    def payload(self):
        return _params_array(self.params).tobytes()

    @classmethod
    def parse(cls, body: bytes):
        return cls(_floats(body, 0))


@dataclass(eq=False)
class PredictedClass(Message):
    label: int
    type_id = 2

    def payload(self):
        return struct.pack("<I", self.label)

    @classmethod
    def parse(cls, body: bytes):
        _expect_len(body, 4)
        return cls(struct.unpack("<I", body)[0])


@dataclass(eq=False)
class LocalParams(Message):
    round: int
    params: np.ndarray
    type_id = 3

    def payload(self):
        return struct.pack("<I", self.round) + _params_array(self.params).tobytes()

    @classmethod
    def parse(cls, body: bytes):
        _expect_len(body, 4, at_least=True)
        return cls(struct.unpack_from("<I", body)[0], _floats(body, 4))


@dataclass(eq=False)
class GlobalParams(Message):
    round: int
    params: np.ndarray
    source_converged: bool
    type_id = 4

    def payload(self):
        return struct.pack("<IB", self.round, int(bool(self.source_converged))) + _params_array(self.params).tobytes()

    @classmethod
    def parse(cls, body: bytes):
        _expect_len(body, 5, at_least=True)
        rnd, flag = struct.unpack_from("<IB", body)
        if flag > 1:
            raise ProtocolError(f"invalid convergence flag {flag}")
        return cls(rnd, _floats(body, 5), bool(flag))


@dataclass(eq=False)
class Terminate(Message):
    final_round: int
    type_id = 5

    def payload(self):
        return struct.pack("<I", self.final_round)

    @classmethod
    def parse(cls, body: bytes):
        _expect_len(body, 4)
        return cls(struct.unpack("<I", body)[0])


MESSAGE_TYPES = {cls.type_id: cls for cls in (InitModel, PredictedClass, LocalParams, GlobalParams, Terminate)}
PARAMETER_MESSAGES = (InitModel, LocalParams, GlobalParams)


def _expect_len(body: bytes, n: int, at_least: bool = False):
    if len(body) < n or (not at_least and len(body) != n):
        raise ProtocolError(f"payload of {len(body)} bytes, expected {'>= ' if at_least else ''}{n}")


def _floats(body: bytes, offset: int) -> np.ndarray:
    if (len(body) - offset) % 4:
        raise ProtocolError("parameter payload is not a whole number of float32 values")
    return np.frombuffer(body, dtype="<f4", offset=offset).astype(np.float32)


def encode(msg: Message) -> bytes:
    body = msg.payload()
    return HEADER.pack(MAGIC, PROTOCOL_VERSION, msg.type_id, len(body)) + body + TRAILER.pack(zlib.crc32(body))


def parse_header(header: bytes) -> tuple[int, int]:
    """Validate a frame header; return (msg_type, payload length)."""
    if len(header) < HEADER.size:
        raise TruncatedFrame(f"header needs {HEADER.size} bytes, got {len(header)}")
    magic, version, msg_type, length = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise VersionMismatch(f"protocol version {version}, expected {PROTOCOL_VERSION}")
    return msg_type, length


def _decode_body(msg_type: int, body: bytes, crc: int) -> Message:
    if zlib.crc32(body) != crc:
        raise ChecksumError("payload checksum mismatch")
    cls = MESSAGE_TYPES.get(msg_type)
    if cls is None:
        raise ProtocolError(f"unknown message type {msg_type}")
    return cls.parse(body)


def decode(frame: bytes) -> Message:
    frame = bytes(frame)
    msg_type, length = parse_header(frame)
    end = HEADER.size + length + TRAILER.size
    if len(frame) < end:
        raise TruncatedFrame(f"frame needs {end} bytes, got {len(frame)}")
    if len(frame) > end:
        raise ProtocolError(f"{len(frame) - end} trailing bytes after frame")
    body = frame[HEADER.size:HEADER.size + length]
    (crc,) = TRAILER.unpack_from(frame, HEADER.size + length)
    return _decode_body(msg_type, body, crc)


def params_checksum(values) -> int:
    return zlib.crc32(_params_array(values).tobytes())


class Endpoint:
    """Blocking, ordered message endpoint. Subclasses move whole frames."""

    def __init__(self):
        self.sent: list[tuple[str, int]] = []
        self.received: list[tuple[str, int]] = []

    def send(self, msg: Message) -> None:
        frame = encode(msg)
        self._send_frame(frame)
        self.sent.append((type(msg).__name__, len(frame)))

    def recv(self, expect: type | tuple | None = None, timeout: float | None = None) -> Message:
        frame = self._recv_frame(timeout)
        msg = decode(frame)
        self.received.append((type(msg).__name__, len(frame)))
        if expect is not None and not isinstance(msg, expect):
            raise ProtocolError(f"expected {expect}, received {type(msg).__name__}")
        return msg

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self, timeout: float | None) -> bytes:
        raise NotImplementedError


_CLOSED = object()


class QueueEndpoint(Endpoint):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float = DEFAULT_TIMEOUT):
        super().__init__()
        self.inbox = inbox
        self.outbox = outbox
        self.timeout = timeout

    def _send_frame(self, frame):
        self.outbox.put(frame)

    def _recv_frame(self, timeout):
        try:
            frame = self.inbox.get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            raise TransportError("receive timed out") from None
        if frame is _CLOSED:
            raise ChannelClosed("peer closed the channel")
        return frame

    def close(self):
        self.outbox.put(_CLOSED)


def channel_pair(timeout: float = DEFAULT_TIMEOUT) -> tuple[QueueEndpoint, QueueEndpoint]:
    """Two connected in-process endpoints; frames still go through encode/decode."""
    a, b = queue.Queue(), queue.Queue()
    return QueueEndpoint(a, b, timeout), QueueEndpoint(b, a, timeout)


_TRANSIENT = (socket.timeout, InterruptedError, BlockingIOError)


class TcpEndpoint(Endpoint):
    def __init__(self, sock: socket.socket, timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES):
        super().__init__()
        self.sock = sock
        self.timeout = timeout
        self.retries = retries
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:  # not a TCP socket (e.g. a socketpair)
            pass

    def _send_frame(self, frame):
        view = memoryview(frame)
        failures = 0
        while view:
            try:
                self.sock.settimeout(self.timeout)
                n = self.sock.send(view)
                view = view[n:]
            except _TRANSIENT as exc:
                failures += 1
                if failures > self.retries:
                    raise RetryExhausted(f"send failed after {self.retries} retries") from exc
                time.sleep(0.05 * failures)
            except OSError as exc:
                raise TransportError(f"send failed: {exc}") from exc

    def _recv_exact(self, n: int, timeout: float) -> bytes:
        buf = bytearray()
        self.sock.settimeout(timeout)
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except socket.timeout:
                raise TransportError("receive timed out") from None
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                if buf:
                    raise TruncatedFrame(f"connection closed after {len(buf)} of {n} bytes")
                raise ChannelClosed("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def _recv_frame(self, timeout):
        timeout = self.timeout if timeout is None else timeout
        header = self._recv_exact(HEADER.size, timeout)
        _, length = parse_header(header)
        rest = self._recv_exact(length + TRAILER.size, timeout)
        return header + rest

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def _addr(addr) -> tuple[str, int]:
    if isinstance(addr, str):
        host, _, port = addr.rpartition(":")
        return host or "127.0.0.1", int(port)
    return addr[0], int(addr[1])


class TcpListener:
    def __init__(self, addr=("127.0.0.1", 0), timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(_addr(addr))
        self.sock.listen(1)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self, **kwargs) -> TcpEndpoint:
        self.sock.settimeout(self.timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise ConnectError("no peer connected before timeout") from None
        return TcpEndpoint(conn, timeout=self.timeout, **kwargs)

    def close(self):
        self.sock.close()


def tcp_listen(addr, timeout: float = DEFAULT_TIMEOUT, **kwargs) -> TcpEndpoint:
    listener = TcpListener(addr, timeout)
    try:
        return listener.accept(**kwargs)
    finally:
        listener.close()


def tcp_dial(addr, timeout: float = DEFAULT_TIMEOUT, **kwargs) -> TcpEndpoint:
    """Connect, retrying refused connections until ``timeout`` elapses."""
    deadline = time.monotonic() + timeout
    delay = 0.02
    while True:
        remaining = deadline - time.monotonic()
        try:
            sock = socket.create_connection(_addr(addr), timeout=max(remaining, 0.01))
            return TcpEndpoint(sock, timeout=kwargs.pop("recv_timeout", DEFAULT_TIMEOUT), **kwargs)
        except OSError as exc:
            if time.monotonic() + delay >= deadline:
                raise ConnectError(f"could not connect to {addr}: {exc}") from exc
            time.sleep(delay)
            delay = min(delay * 2, 0.5)
