"""Framed messaging over a reliable ordered byte stream.

Frame layout: 1-byte type, 4-byte little-endian payload length, 8-byte
little-endian sequence number, then the payload. Sequence numbers count
per direction from zero and must arrive strictly in order; any gap means
the transport lied about being reliable and ordered.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass, field
from enum import IntEnum


class FrameType(IntEnum):
    TIMING = 1
    PARITY = 2
    QBER_SAMPLE = 3
    SEED = 4
    CONTROL = 5
    HASH = 6


_HEADER = struct.Struct("<BIQ")


class TransportClosed(ConnectionError):
    """Peer went away mid-session."""


class FramingError(RuntimeError):
    """Malformed frame or out-of-order sequence number."""


@dataclass(frozen=True)
class Frame:
    type: FrameType
    seq: int
    payload: bytes

    def control(self) -> dict:
        if self.type is not FrameType.CONTROL:
            raise FramingError(f"expected CONTROL, got {self.type.name}")
        return json.loads(self.payload.decode("utf-8"))


def control_payload(**fields) -> bytes:
    return json.dumps(fields, sort_keys=True).encode("utf-8")


@dataclass
class TranscriptStats:
    """Byte/frame tally per direction, for leakage and determinism audits."""

    frames: dict = field(default_factory=dict)   # FrameType -> count
    payload_bytes: dict = field(default_factory=dict)
    raw: bytearray | None = None                 # full bytes when recording

    def note(self, ftype: FrameType, payload: bytes, raw: bytes):
        self.frames[ftype] = self.frames.get(ftype, 0) + 1
        self.payload_bytes[ftype] = self.payload_bytes.get(ftype, 0) + len(payload)
        if self.raw is not None:
            self.raw += raw


class FrameChannel:
    """Send/receive frames over a connected socket (or socket-like object).

    Tracks one sequence counter per direction; ``record=True`` keeps the
    outbound raw byte transcript for determinism checks.
    """

    def __init__(self, sock: socket.socket, record: bool = False):
        self._sock = sock
        self._seq_out = 0
        self._seq_in = 0
        self._buffer = b""
        self.sent = TranscriptStats(raw=bytearray() if record else None)
        self.received = TranscriptStats()

    def send(self, ftype: FrameType, payload: bytes) -> None:
        raw = _HEADER.pack(int(ftype), len(payload), self._seq_out) + payload
        self._seq_out += 1
        try:
            self._sock.sendall(raw)
        except (BrokenPipeError, ConnectionResetError, OSError) as exc:
            raise TransportClosed(str(exc)) from exc
        self.sent.note(ftype, payload, raw)

    def _read_exact(self, n: int) -> bytes:
        while len(self._buffer) < n:
            try:
                chunk = self._sock.recv(1 << 16)
            except (ConnectionResetError, OSError) as exc:
                raise TransportClosed(str(exc)) from exc
            if not chunk:
                raise TransportClosed("peer closed the connection")
            self._buffer += chunk
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def recv(self) -> Frame:
        header = self._read_exact(_HEADER.size)
        ftype, length, seq = _HEADER.unpack(header)
        if seq != self._seq_in:
            raise FramingError(f"sequence jump: expected {self._seq_in}, got {seq}")
        self._seq_in += 1
        payload = self._read_exact(length) if length else b""
        frame = Frame(FrameType(ftype), seq, payload)
        self.received.note(frame.type, payload, header + payload)
        return frame

    def expect(self, ftype: FrameType) -> Frame:
        frame = self.recv()
        if frame.type is not ftype:
            raise FramingError(f"expected {ftype.name}, received {frame.type.name}")
        return frame

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


def loopback_pair(record: bool = False) -> tuple[FrameChannel, FrameChannel]:
    """Two connected channels in one process (backed by a socketpair)."""
    left, right = socket.socketpair()
    return FrameChannel(left, record=record), FrameChannel(right, record=record)


def connect(host: str, port: int, record: bool = False, timeout: float = 30.0) -> FrameChannel:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(timeout)
    return FrameChannel(sock, record=record)


class Listener:
    """Accept loop for the receiving endpoint; reusable between sessions."""

    def __init__(self, host: str, port: int):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(1)

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    def accept(self, record: bool = False, timeout: float | None = None) -> FrameChannel:
        if timeout is not None:
            self._sock.settimeout(timeout)
        conn, _ = self._sock.accept()
        return FrameChannel(conn, record=record)

    def close(self):
        self._sock.close()
