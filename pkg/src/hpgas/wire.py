"""Wire format of the emulated one-sided transport.

Request header, 40 bytes little-endian::

    u8  opcode
    u8  flags          (reserved, 0)
    u16 reserved       (0)
    u32 segid
    u32 target_rel_unit
    u32 origin         (absolute unit id of the sender)
    u64 target_disp
    u64 nbytes
    u64 tag

followed by ``nbytes`` payload bytes for PUT, 8 bytes for atomics, the block
for ALLGATHER_PART and nothing for GET / BARRIER_TOKEN.

Reply header, 24 bytes little-endian::

    u64 tag
    u32 status
    u32 reserved       (0)
    u64 nbytes

followed by ``nbytes`` payload bytes (GET data, atomic old value).
Collective messages (BARRIER_TOKEN, ALLGATHER_PART) are one-way and never
answered.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

REQUEST = struct.Struct("<BBHIIIQQQ")
REPLY = struct.Struct("<QIIQ")
assert REQUEST.size == 40 and REPLY.size == 24


class Op(enum.IntEnum):
    PUT = 1
    GET = 2
    ATOMIC_ADD = 3
    ATOMIC_XOR = 4
    BARRIER_TOKEN = 5
    ALLGATHER_PART = 6


ONE_WAY = frozenset({Op.BARRIER_TOKEN, Op.ALLGATHER_PART})


class Status(enum.IntEnum):
    OK = 0
    ERR_RANGE = 1
    ERR_SEGID = 2


class ProtocolError(ValueError):
    pass


def _payload_len(op: Op, nbytes: int) -> int:
    if op in (Op.PUT, Op.ALLGATHER_PART):
        return nbytes
    if op in (Op.ATOMIC_ADD, Op.ATOMIC_XOR):
        return 8
    return 0


@dataclass(frozen=True)
class RmaRequest:
    opcode: Op
    segid: int
    target_rel_unit: int
    target_disp: int
    nbytes: int
    tag: int
    payload: bytes = b""
    origin: int = 0

    def header(self) -> bytes:
        return REQUEST.pack(int(self.opcode), 0, 0, self.segid, self.target_rel_unit,
                            self.origin, self.target_disp, self.nbytes, self.tag)

    def encode(self) -> bytes:
        if len(self.payload) != _payload_len(self.opcode, self.nbytes):
            raise ProtocolError(
                f"{self.opcode.name} with nbytes={self.nbytes} carries "
                f"{len(self.payload)} payload bytes")
        return self.header() + bytes(self.payload)

    @classmethod
    def decode_header(cls, data) -> tuple[Op, int, int, int, int, int, int]:
        op, flags, _res, segid, rel, origin, disp, nbytes, tag = REQUEST.unpack(data)
        try:
            op = Op(op)
        except ValueError:
            raise ProtocolError(f"unknown opcode {op}") from None
        return op, segid, rel, origin, disp, nbytes, tag

    @classmethod
    def decode(cls, data) -> "RmaRequest":
        data = bytes(data)
        op, segid, rel, origin, disp, nbytes, tag = cls.decode_header(data[:REQUEST.size])
        payload = data[REQUEST.size:]
        if len(payload) != _payload_len(op, nbytes):
            raise ProtocolError("payload length does not match header")
        return cls(op, segid, rel, disp, nbytes, tag, payload, origin)

    @property
    def payload_len(self) -> int:
        return _payload_len(self.opcode, self.nbytes)


@dataclass(frozen=True)
class RmaReply:
    tag: int
    status: Status
    payload: bytes = b""

    def __post_init__(self):
        if self.status != Status.OK and self.payload:
            raise ProtocolError("error replies carry no payload")

    def header(self) -> bytes:
        return REPLY.pack(self.tag, int(self.status), 0, len(self.payload))

    def encode(self) -> bytes:
        return self.header() + bytes(self.payload)

    @classmethod
    def decode_header(cls, data) -> tuple[int, Status, int]:
        tag, status, _res, nbytes = REPLY.unpack(data)
        try:
            status = Status(status)
        except ValueError:
            raise ProtocolError(f"unknown status {status}") from None
        return tag, status, nbytes

    @classmethod
    def decode(cls, data) -> "RmaReply":
        data = bytes(data)
        tag, status, nbytes = cls.decode_header(data[:REPLY.size])
        payload = data[REPLY.size:]
        if len(payload) != nbytes:
            raise ProtocolError("payload length does not match header")
        return cls(tag, status, payload)


def request_payload_len(op: Op, nbytes: int) -> int:
    return _payload_len(op, nbytes)
