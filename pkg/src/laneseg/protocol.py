"""Framed binary protocol between the car client and the edge server.

Every message is::

    u32 length (big-endian)   number of payload bytes after the type byte
    u8  type
    payload

Numeric fields inside payloads are big-endian as well. The MODEL payload is
an LSEG checkpoint and keeps its own little-endian layout.
"""
from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError

HEADER = struct.Struct(">IB")
MAX_PAYLOAD = 256 * 1024 * 1024


class MsgType(enum.IntEnum):
    FRAME = 0x01
    LABEL = 0x02
    TRAIN_REQUEST = 0x03
    MODEL = 0x04
    ACK = 0x05
    ERROR = 0x06


class ErrorCode(enum.IntEnum):
    TRUNCATED = 1
    BAD_LENGTH = 2
    UNKNOWN_TYPE = 3
    ID_MISMATCH = 4
    EMPTY_DATASET = 5
    BUSY = 6
    TRAINING_FAILED = 7
    UNEXPECTED = 8
    BAD_DATA = 9


# framing violations after which the stream cannot be trusted
FATAL_CODES = {ErrorCode.TRUNCATED, ErrorCode.BAD_LENGTH, ErrorCode.UNKNOWN_TYPE}


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    payload: bytes = b""

    def encode(self) -> bytes:
        return encode_message(self.msg_type, self.payload)


def encode_message(msg_type: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(len(payload), int(msg_type)) + bytes(payload)


def _msg_type(raw: int) -> MsgType:
    try:
        return MsgType(raw)
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{raw:02x}", ErrorCode.UNKNOWN_TYPE) from None


def decode_message(data: bytes) -> WireMessage:
    """Decode exactly one message occupying all of ``data``."""
    if len(data) < HEADER.size:
        raise ProtocolError(f"message shorter than the {HEADER.size}-byte header", ErrorCode.TRUNCATED)
    length, raw_type = HEADER.unpack_from(data)
    msg_type = _msg_type(raw_type)
    body = data[HEADER.size:]
    if len(body) < length:
        raise ProtocolError(f"declared {length} payload bytes, got {len(body)}", ErrorCode.TRUNCATED)
    if len(body) > length:
        raise ProtocolError(f"declared {length} payload bytes, got {len(body)}", ErrorCode.BAD_LENGTH)
    return WireMessage(msg_type, bytes(body))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(min(n - len(buf), 1 << 20))
        except socket.timeout:
            raise ProtocolError(f"timed out after {len(buf)} of {n} bytes", ErrorCode.TRUNCATED) from None
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_message(sock: socket.socket) -> WireMessage | None:
    """Read one message; ``None`` on a clean EOF between messages."""
    head = _recv_exact(sock, HEADER.size)
    if not head:
        return None
    if len(head) < HEADER.size:
        raise ProtocolError("connection closed inside a message header", ErrorCode.TRUNCATED)
    length, raw_type = HEADER.unpack(head)
    msg_type = _msg_type(raw_type)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds limit {MAX_PAYLOAD}", ErrorCode.BAD_LENGTH)
    body = _recv_exact(sock, length)
    if len(body) != length:
        raise ProtocolError(f"declared {length} payload bytes, got {len(body)}", ErrorCode.TRUNCATED)
    return WireMessage(msg_type, body)


def send_message(sock: socket.socket, msg_type: int, payload: bytes = b"") -> None:
    sock.sendall(encode_message(msg_type, payload))


# ---------------------------------------------------------------- payloads

FRAME_HEAD = struct.Struct(">QIIB")


@dataclass(frozen=True)
class FramePayload:
    frame_id: int
    width: int
    height: int
    channels: int
    pixels: bytes

    def __post_init__(self):
        if len(self.pixels) != self.width * self.height * self.channels:
            raise ProtocolError(
                f"frame {self.frame_id}: {len(self.pixels)} pixel bytes != "
                f"{self.width}x{self.height}x{self.channels}",
                ErrorCode.BAD_LENGTH,
            )

    @classmethod
    def from_array(cls, frame_id: int, arr: np.ndarray) -> "FramePayload":
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(frame_id, w, h, c, arr.tobytes())

    def to_array(self) -> np.ndarray:
        arr = np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width, self.channels)
        return arr[:, :, 0].copy() if self.channels == 1 else arr.copy()

    def encode(self) -> bytes:
        return FRAME_HEAD.pack(self.frame_id, self.width, self.height, self.channels) + self.pixels

    @classmethod
    def decode(cls, payload: bytes) -> "FramePayload":
        if len(payload) < FRAME_HEAD.size:
            raise ProtocolError("frame payload shorter than its header", ErrorCode.BAD_LENGTH)
        fid, w, h, c = FRAME_HEAD.unpack_from(payload)
        return cls(fid, w, h, c, bytes(payload[FRAME_HEAD.size:]))


def encode_ack(frame_id: int = 0) -> bytes:
    return struct.pack(">Q", frame_id)


def decode_ack(payload: bytes) -> int:
    if len(payload) != 8:
        raise ProtocolError("ACK payload must be 8 bytes", ErrorCode.BAD_LENGTH)
    return struct.unpack(">Q", payload)[0]


def encode_train_request(epochs: int = 0) -> bytes:
    """``epochs == 0`` asks the server to use its configured value."""
    return struct.pack(">I", epochs)


def decode_train_request(payload: bytes) -> int:
    if len(payload) != 4:
        raise ProtocolError("TRAIN_REQUEST payload must be 4 bytes", ErrorCode.BAD_LENGTH)
    return struct.unpack(">I", payload)[0]


def encode_error(code: int, reason: str) -> bytes:
    return struct.pack(">B", int(code)) + reason.encode("utf-8")


def decode_error(payload: bytes) -> tuple[int, str]:
    if not payload:
        raise ProtocolError("ERROR payload must carry a code byte", ErrorCode.BAD_LENGTH)
    return payload[0], payload[1:].decode("utf-8", errors="replace")
