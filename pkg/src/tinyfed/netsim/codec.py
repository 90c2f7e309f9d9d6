"""Length-prefixed binary framing for the server/device messages.

Frame layout (all little-endian)::

    length u32 | msg_type u8 | payload

where ``length`` counts the type byte plus the payload.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MODEL_DOWN, DENSE_UP, SPARSE_UP, TASK_ASSIGN, ACK, BYE = 1, 2, 3, 4, 5, 6
PROTOCOL_VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024
PREFIX = struct.Struct("<I")
HEADER_SIZE = PREFIX.size + 1


class ProtocolError(Exception):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class LengthMismatchError(ProtocolError):
    pass


class UnknownMessageTypeError(ProtocolError):
    pass


class FrameTooLargeError(ProtocolError):
    pass


def _f32(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype="<f4")


def _same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(eq=False)
class ModelDown:
    round: int
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, "<f4"))
    msg_type = MODEL_DOWN

    def __post_init__(self):
        self.values = _f32(self.values)

    def __eq__(self, other):
        return (type(other) is type(self) and self.round == other.round
                and _same_bits(self.values, other.values))


class DenseUp(ModelDown):
    msg_type = DENSE_UP


@dataclass(eq=False)
class SparseUp:
    round: int
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, "<u4"))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, "<f4"))
    msg_type = SPARSE_UP

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype="<u4")
        self.values = _f32(self.values)
        if self.indices.shape != self.values.shape:
            raise LengthMismatchError("sparse indices and values differ in length")

    def __eq__(self, other):
        return (type(other) is SparseUp and self.round == other.round
                and _same_bits(self.indices, other.indices)
                and _same_bits(self.values, other.values))


@dataclass
class TaskAssign:
    task_seed: int
    protocol: int
    version: int = PROTOCOL_VERSION
    msg_type = TASK_ASSIGN


@dataclass
class Ack:
    round: int
    msg_type = ACK


@dataclass
class Bye:
    msg_type = BYE


Message = ModelDown | DenseUp | SparseUp | TaskAssign | Ack | Bye


def encode_payload(msg) -> bytes:
    t = msg.msg_type
    if t in (MODEL_DOWN, DENSE_UP):
        return struct.pack("<II", msg.round, msg.values.size) + msg.values.tobytes()
    if t == SPARSE_UP:
        pairs = np.empty(msg.indices.size, dtype=[("i", "<u4"), ("v", "<f4")])
        pairs["i"] = msg.indices
        pairs["v"] = msg.values
        return struct.pack("<II", msg.round, msg.indices.size) + pairs.tobytes()
    if t == TASK_ASSIGN:
        return struct.pack("<QBB", msg.task_seed, msg.protocol, msg.version)
    if t == ACK:
        return struct.pack("<I", msg.round)
    if t == BYE:
        return b""
    raise UnknownMessageTypeError(f"cannot encode message type {t}")


def encode_frame(msg) -> bytes:
    payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLargeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return PREFIX.pack(1 + len(payload)) + bytes([msg.msg_type]) + payload


def _expect(payload: bytes, size: int, what: str) -> None:
    if len(payload) != size:
        raise LengthMismatchError(f"{what}: expected {size} payload bytes, got {len(payload)}")


def decode_body(msg_type: int, payload: bytes):
    """Decode the type byte and payload of one frame."""
    if msg_type in (MODEL_DOWN, DENSE_UP, SPARSE_UP):
        if len(payload) < 8:
            raise LengthMismatchError("payload shorter than its round/count header")
        rnd, count = struct.unpack_from("<II", payload)
        width = 8 if msg_type == SPARSE_UP else 4
        _expect(payload, 8 + width * count, "count field disagrees with payload")
        if msg_type == SPARSE_UP:
            pairs = np.frombuffer(payload, dtype=[("i", "<u4"), ("v", "<f4")], count=count,
                                  offset=8)
            return SparseUp(rnd, pairs["i"].copy(), pairs["v"].copy())
        values = np.frombuffer(payload, dtype="<f4", count=count, offset=8).copy()
        return (ModelDown if msg_type == MODEL_DOWN else DenseUp)(rnd, values)
    if msg_type == TASK_ASSIGN:
        _expect(payload, 10, "TaskAssign")
        return TaskAssign(*struct.unpack("<QBB", payload))
    if msg_type == ACK:
        _expect(payload, 4, "Ack")
        return Ack(*struct.unpack("<I", payload))
    if msg_type == BYE:
        _expect(payload, 0, "Bye")
        return Bye()
    raise UnknownMessageTypeError(f"unknown message type {msg_type}")


def split_frame(buf: bytes) -> tuple[int, bytes, int]:
    """Return (msg_type, payload, bytes consumed) for the frame at the start of ``buf``."""
    if len(buf) < PREFIX.size:
        raise TruncatedFrameError(f"need {PREFIX.size} length bytes, have {len(buf)}")
    (length,) = PREFIX.unpack_from(buf)
    if length < 1:
        raise LengthMismatchError("frame length must cover the type byte")
    if length - 1 > MAX_PAYLOAD:
        raise FrameTooLargeError(f"frame declares {length - 1} payload bytes")
    end = PREFIX.size + length
    if len(buf) < end:
        raise TruncatedFrameError(f"frame declares {length} bytes, only {len(buf) - 4} present")
    return buf[4], bytes(buf[5:end]), end


def decode_frame(buf: bytes):
    msg_type, payload, _ = split_frame(buf)
    return decode_body(msg_type, payload)


def payload_scalars(msg) -> int:
    """32-bit value units carried by a message (model values, sparse index/value pairs)."""
    if isinstance(msg, SparseUp):
        return 2 * msg.indices.size
    if isinstance(msg, ModelDown):
        return msg.values.size
    return 0
