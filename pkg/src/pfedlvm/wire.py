"""Binary message format shared by pFedLVM and the FL baselines.

Layout (all little-endian)::

    magic    4 bytes  b"PFLV"
    version  u8
    kind     u8
    round    u64
    vehicle  u32      sender for uploads, recipient for downloads
    rank     u8
    dims     u64 * rank
    payload  f64 * prod(dims)

``payload_bytes`` counts the payload only; cost models never see the header.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .tensor_nn import serialized_byte_size

MAGIC = b"PFLV"
VERSION = 1
_HEADER = struct.Struct("<4sBBQIB")


class WireError(ValueError):
    pass


class MessageKind(enum.IntEnum):
    COMPRESSED_FEATURES = 1
    SHARED_FEATURES = 2
    PARAMETER_UP = 3
    PARAMETER_DOWN = 4


FEATURE_KINDS = frozenset({MessageKind.COMPRESSED_FEATURES, MessageKind.SHARED_FEATURES})


@dataclass
class Message:
    kind: MessageKind
    round_index: int
    vehicle_id: int
    payload: np.ndarray
    # in-process audit tag: "feature" or "parameter"; never serialized
    provenance: str = "feature"

    @property
    def payload_bytes(self) -> int:
        return serialized_byte_size(self.payload)

    @property
    def is_upload(self) -> bool:
        return self.kind in (MessageKind.COMPRESSED_FEATURES, MessageKind.PARAMETER_UP)


def encode_payload(t: np.ndarray) -> bytes:
    return np.ascontiguousarray(t, dtype="<f8").tobytes()


def encode(msg: Message) -> bytes:
    shape = msg.payload.shape
    head = _HEADER.pack(MAGIC, VERSION, int(msg.kind), msg.round_index, msg.vehicle_id, len(shape))
    dims = struct.pack(f"<{len(shape)}Q", *shape)
    return head + dims + encode_payload(msg.payload)


def decode(data: bytes, provenance: str = "feature") -> Message:
    if len(data) < _HEADER.size:
        raise WireError("truncated header")
    magic, version, kind, rnd, vid, rank = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    if kind not in MessageKind._value2member_map_:
        raise WireError(f"unknown message kind {kind}")
    off = _HEADER.size
    if len(data) < off + 8 * rank:
        raise WireError(f"truncated shape: rank {rank}")
    shape = struct.unpack_from(f"<{rank}Q", data, off)
    off += 8 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(data) - off != 8 * n:
        raise WireError(f"payload length {len(data) - off} does not match shape {shape}")
    payload = np.frombuffer(data, "<f8", n, off).astype(np.float64).reshape(shape)
    return Message(MessageKind(kind), rnd, vid, payload, provenance)


def header_size(rank: int) -> int:
    return _HEADER.size + 8 * rank
