"""Blocking one-sided operations with locality dispatch.

A target on the caller's node is reached by copying straight into the
shared mapping; any other target goes through the transport and the call
returns only after the target's progress agent acknowledged the transfer.
``path`` forces one route ("local" or "remote") for testing and benchmarks.
"""

from __future__ import annotations

import struct

from .errors import AlignmentError, OutOfRangeError, TransportError, UnknownSegmentError
from .global_memory import GlobalPointer
from .segment import OP_ADD, OP_XOR
from .wire import Op, RmaReply, RmaRequest, Status

LOCAL = "local"
REMOTE = "remote"

_ATOMIC_OPS = {OP_ADD: Op.ATOMIC_ADD, OP_XOR: Op.ATOMIC_XOR}


def choose_path(rt, unit: int, path: str | None) -> str:
    if path is None:
        return LOCAL if rt.memory.is_local(unit) else REMOTE
    if path == LOCAL and not rt.memory.is_local(unit):
        raise ValueError(f"unit {unit} does not share memory with unit {rt.me}")
    if path not in (LOCAL, REMOTE):
        raise ValueError(f"unknown path {path!r}")
    return path


def _bytes_view(buf) -> memoryview:
    mv = memoryview(buf)
    return mv if mv.format == "B" and mv.ndim == 1 else mv.cast("B")


def _check_reply(reply: RmaReply, gptr: GlobalPointer):
    if reply.status == Status.OK:
        return
    if reply.status == Status.ERR_SEGID:
        raise UnknownSegmentError(f"unit {gptr.unit} has no window for segid {gptr.segid}")
    raise OutOfRangeError(f"unit {gptr.unit} rejected the range at {gptr}")


_KEYS = {(k, h): f"{k}_{h}" for k in ("put", "get", "atomic") for h in (LOCAL, REMOTE)}


def _count(rt, kind: str, how: str, nbytes: int):
    stats = rt.stats
    stats[_KEYS[kind, how]] += 1
    stats[kind + "_bytes"] += nbytes


def put_blocking(rt, gptr: GlobalPointer, src, nbytes: int | None = None,
                 path: str | None = None):
    data = _bytes_view(src)
    n = len(data) if nbytes is None else int(nbytes)
    if n > len(data):
        raise ValueError(f"source holds {len(data)} bytes, {n} requested")
    data = data[:n]
    how = choose_path(rt, gptr.unit, path)
    mem = rt.memory
    if how == LOCAL:
        seg, index = mem.dereference_local(gptr, nbytes=n)
        if n:
            seg.write(index, data)
    else:
        _, rel, disp = mem.dereference_remote(gptr, n)
        if n:
            t = rt.transport
            reply = t.request(gptr.unit, RmaRequest(Op.PUT, gptr.segid, rel, disp, n,
                                                    t.next_tag(), data, origin=rt.me))
            _check_reply(reply, gptr)
    _count(rt, "put", how, n)


def get_blocking(rt, gptr: GlobalPointer, dst=None, nbytes: int | None = None,
                 path: str | None = None):
    """Read ``nbytes`` at ``gptr`` into ``dst`` (allocated if None) and return it."""
    if dst is None:
        if nbytes is None:
            raise ValueError("need a destination buffer or nbytes")
        dst = bytearray(nbytes)
    out = _bytes_view(dst)
    if out.readonly:
        raise ValueError("destination buffer is read-only")
    n = len(out) if nbytes is None else int(nbytes)
    if n > len(out):
        raise ValueError(f"destination holds {len(out)} bytes, {n} requested")
    how = choose_path(rt, gptr.unit, path)
    mem = rt.memory
    if how == LOCAL:
        seg, index = mem.dereference_local(gptr, nbytes=n)
        if n:
            seg.read(index, n, out)
    else:
        _, rel, disp = mem.dereference_remote(gptr, n)
        if n:
            t = rt.transport
            reply = t.request(gptr.unit, RmaRequest(Op.GET, gptr.segid, rel, disp, n,
                                                    t.next_tag(), origin=rt.me),
                              into=out[:n])
            _check_reply(reply, gptr)
    _count(rt, "get", how, n)
    return dst


def atomic_op64(rt, gptr: GlobalPointer, op: str, operand: int,
                path: str | None = None) -> int:
    """Atomically apply ``op`` ("add" or "xor") to the u64 at ``gptr``; return the old value."""
    if op not in _ATOMIC_OPS:
        raise ValueError(f"unsupported atomic op {op!r}")
    if gptr.offset % 8:
        raise AlignmentError(f"atomic target offset {gptr.offset} is not 8-byte aligned")
    operand &= 0xFFFFFFFFFFFFFFFF
    how = choose_path(rt, gptr.unit, path)
    mem = rt.memory
    if how == LOCAL:
        seg, index = mem.dereference_local(gptr, nbytes=8)
        old = seg.fetch_op(index, op, operand)
    else:
        _, rel, disp = mem.dereference_remote(gptr, 8)
        t = rt.transport
        reply = t.request(gptr.unit, RmaRequest(_ATOMIC_OPS[op], gptr.segid, rel, disp, 8,
                                                t.next_tag(), struct.pack("<Q", operand),
                                                origin=rt.me))
        _check_reply(reply, gptr)
        if len(reply.payload) != 8:
            raise TransportError("atomic reply without the old value")
        old = struct.unpack("<Q", reply.payload)[0]
    _count(rt, "atomic", how, 8)
    return old


def barrier(rt, team):
    rt.transport.barrier(team)
