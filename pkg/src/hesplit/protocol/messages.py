"""Protocol messages, frames and the payload codec.

Frame (all little-endian)::

    u32 payload length | u8 type | u64 session id | u64 sequence | payload

Payload::

    u32 meta length | meta (UTF-8 JSON object) | u32 blob count | (u32 length | bytes) * count

Ciphertext blobs use the backend serialization; array blobs are ``.npy``
images loaded with ``allow_pickle=False``.
"""

from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

FRAME_HEADER = struct.Struct("<IBQQ")
MAX_PAYLOAD = (1 << 32) - 1
_U32 = struct.Struct("<I")


class ProtocolError(RuntimeError):
    """Handshake, framing, sequencing or ledger failure."""


class MsgType(enum.IntEnum):
    HELLO = 1
    PUBKEYS = 2
    ENC_WEIGHTS_ACK = 3
    FWD_OUT = 4
    BOUNDARY_GRAD = 5
    REFRESH_REQ = 6
    REFRESH_RESP = 7
    EPOCH_DONE = 8
    SHUTDOWN = 9
    DATA_UPLOAD = 10  # encrypted samples from the data owner (encrypt_data only)


@dataclass
class Message:
    type: MsgType
    meta: dict = field(default_factory=dict)
    blobs: list[bytes] = field(default_factory=list)
    session: int = 0
    seq: int = 0

    def encode_payload(self) -> bytes:
        meta = json.dumps(self.meta, separators=(",", ":")).encode()
        parts = [_U32.pack(len(meta)), meta, _U32.pack(len(self.blobs))]
        for b in self.blobs:
            parts.append(_U32.pack(len(b)))
            parts.append(b)
        return b"".join(parts)

    def encode(self) -> bytes:
        payload = self.encode_payload()
        if len(payload) > MAX_PAYLOAD:
            raise ProtocolError(f"payload of {len(payload)} bytes exceeds the u32 frame limit")
        return FRAME_HEADER.pack(len(payload), int(self.type), self.session, self.seq) + payload


def decode_payload(payload: bytes) -> tuple[dict, list[bytes]]:
    view = memoryview(payload)
    try:
        (n,) = _U32.unpack_from(view, 0)
        off = 4
        meta = json.loads(bytes(view[off:off + n]).decode()) if n else {}
        off += n
        (count,) = _U32.unpack_from(view, off)
        off += 4
        blobs = []
        for _ in range(count):
            (length,) = _U32.unpack_from(view, off)
            off += 4
            if off + length > len(view):
                raise ProtocolError(f"blob overruns payload at byte {off}")
            blobs.append(bytes(view[off:off + length]))
            off += length
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed payload: {exc}") from None
    if off != len(view):
        raise ProtocolError(f"{len(view) - off} trailing payload bytes")
    if not isinstance(meta, dict):
        raise ProtocolError("payload meta must be a JSON object")
    return meta, blobs


def decode_frame(frame: bytes) -> Message:
    if len(frame) < FRAME_HEADER.size:
        raise ProtocolError("truncated frame header")
    length, mtype, session, seq = FRAME_HEADER.unpack_from(frame)
    if len(frame) != FRAME_HEADER.size + length:
        raise ProtocolError(f"frame length {len(frame) - FRAME_HEADER.size} != declared {length}")
    try:
        kind = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}") from None
    meta, blobs = decode_payload(frame[FRAME_HEADER.size:])
    return Message(kind, meta, blobs, session, seq)


def array_blob(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def blob_array(b: bytes) -> np.ndarray:
    return np.load(io.BytesIO(b), allow_pickle=False)
