"""Global pointers, the translation table, window registries and allocation.

Two windows alias the same physical bytes for every allocation: the node's
shared segment (load/store by units of the same locality group) and the
team's window registry (displacement-addressed access over the transport).

Displacement space of a unit within one registry is a bump sequence of the
regions it attached, starting at 0.  For the world registry that is::

    [0, 64)                       control words (segid / team counters)
    [64, 64 + pool)               non-collective pool, segid 0
    [64 + pool, ...)              collective allocations of the world team
"""

from __future__ import annotations

import bisect
import dataclasses
import logging
import struct
import threading
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional, Sequence

from . import topology
from .errors import (CollectiveMismatchError, DoubleFreeError, ForeignPointerError,
                     NotAMemberError, OutOfRangeError, PoolExhaustedError,
                     UnknownSegmentError)
from .segment import ALIGN, SharedSegment, align_up, segment_name
from .topology import Team

log = logging.getLogger(__name__)

POOL_SEGID = 0
CONTROL_SEGID = 0xFFFFFFFF
CONTROL_BYTES = 64
SLOT_SEGID = 0
SLOT_TEAM = 1

NOT_LOCAL = None

_GPTR = struct.Struct("<IIQ")


class GlobalPointer(NamedTuple):
    unit: int
    segid: int
    offset: int

    def __add__(self, nbytes: int) -> "GlobalPointer":
        return self._replace(offset=self.offset + int(nbytes))

    def at_unit(self, unit: int) -> "GlobalPointer":
        return self._replace(unit=unit)

    def pack(self) -> bytes:
        return _GPTR.pack(self.unit, self.segid, self.offset)

    @classmethod
    def unpack(cls, data) -> "GlobalPointer":
        return cls(*_GPTR.unpack(data))


@dataclass(frozen=True)
class TableEntry:
    segid: int
    team_index: int
    seg: Optional[SharedSegment]
    disp_set: tuple[int, ...]
    nbytes_per_unit: int
    # partition index of every unit sharing ``seg`` with the caller
    local_parts: dict = dataclasses.field(default_factory=dict, compare=False)
    # byte offset of this window's data inside each unit's partition
    base: int = 0


class TranslationTable:
    """segid -> TableEntry, iterated in ascending segid order.

    Mutations build a new key list and swap it in, so a concurrent reader
    (the progress agent) sees either the old or the new table, never a
    half-inserted entry.
    """

    def __init__(self):
        self._keys: list[int] = []
        self._entries: dict[int, TableEntry] = {}
        self._lock = threading.Lock()

    def insert(self, entry: TableEntry):
        with self._lock:
            if entry.segid in self._entries:
                raise ValueError(f"segid {entry.segid} already in table")
            keys = list(self._keys)
            bisect.insort(keys, entry.segid)
            self._entries[entry.segid] = entry
            self._keys = keys

    def replace(self, entry: TableEntry):
        with self._lock:
            if entry.segid not in self._entries:
                raise UnknownSegmentError(entry.segid)
            self._entries[entry.segid] = entry

    def remove(self, segid: int) -> TableEntry:
        with self._lock:
            entry = self._entries.get(segid)
            if entry is None:
                raise UnknownSegmentError(f"segid {segid} not in table")
            keys = list(self._keys)
            del keys[bisect.bisect_left(keys, segid)]
            self._keys = keys
            del self._entries[segid]
            return entry

    def get(self, segid: int) -> TableEntry:
        try:
            return self._entries[segid]
        except KeyError:
            raise UnknownSegmentError(f"segid {segid} not in table") from None

    def __contains__(self, segid: int) -> bool:
        return segid in self._entries

    def __len__(self) -> int:
        return len(self._keys)

    def segids(self) -> list[int]:
        return list(self._keys)

    def __iter__(self) -> Iterator[TableEntry]:
        entries = self._entries
        for k in self._keys:
            e = entries.get(k)
            if e is not None:
                yield e


class Region(NamedTuple):
    disp: int
    length: int


class WindowRegistry:
    """Regions attached to one team's dynamic window, for every member.

    ``index`` equals the owning team's teamlist index.
    """

    def __init__(self, index: int):
        self.index = index
        self._regions: dict[tuple[int, int], Region] = {}
        self._spans: dict[int, list[tuple[int, int, int]]] = {}
        self._cursor: dict[int, int] = {}

    def attach(self, rel: int, segid: int, disp: int, length: int) -> Region:
        if disp % ALIGN:
            raise ValueError(f"displacement {disp} is not {ALIGN}-byte aligned")
        if (rel, segid) in self._regions:
            raise ValueError(f"segid {segid} already attached for unit {rel}")
        spans = self._spans.setdefault(rel, [])
        end = disp + length
        i = bisect.bisect_left(spans, (disp,))
        if (i > 0 and spans[i - 1][1] > disp) or (i < len(spans) and spans[i][0] < end):
            raise ValueError(f"region [{disp}, {end}) overlaps an attached region of unit {rel}")
        spans.insert(i, (disp, end, segid))
        region = Region(disp, length)
        self._regions[(rel, segid)] = region
        self._cursor[rel] = max(self._cursor.get(rel, 0), align_up(end))
        return region

    def attach_next(self, rel: int, segid: int, length: int) -> Region:
        return self.attach(rel, segid, self._cursor.get(rel, 0), length)

    def detach(self, rel: int, segid: int):
        region = self._regions.pop((rel, segid), None)
        if region is None:
            raise UnknownSegmentError(f"segid {segid} not attached for unit {rel}")
        spans = self._spans[rel]
        spans.remove((region.disp, region.disp + region.length, segid))

    def detach_segid(self, segid: int):
        for rel, sid in [k for k in self._regions if k[1] == segid]:
            self.detach(rel, sid)

    def lookup(self, rel: int, segid: int) -> Region:
        try:
            return self._regions[(rel, segid)]
        except KeyError:
            raise UnknownSegmentError(f"segid {segid} not attached for unit {rel}") from None

    def regions(self, rel: int) -> list[tuple[int, int, int]]:
        return list(self._spans.get(rel, []))


def target_disp(offset: int, disp_set: Sequence[int], rel: int) -> int:
    return offset + disp_set[rel]


class GlobalMemory:
    """Per-process view of the global address space."""

    def __init__(self, me: int, units_per_node: int, run_id: str = "", pool_bytes: int = 0):
        self.me = me
        self.units_per_node = units_per_node
        self.node_id = topology.node_of(me, units_per_node)
        self.run_id = run_id
        self.pool_bytes = pool_bytes
        self.table = TranslationTable()
        self.registries: dict[int, WindowRegistry] = {}
        self.teams: dict[int, Team] = {}
        self.retired: set[int] = set()
        self.pool_entry: TableEntry | None = None
        self.control_entry: TableEntry | None = None
        self._pool_cursor = 0
        self._live: dict[int, int] = {}
        self._freed: set[int] = set()

    def add_team(self, team: Team):
        if team.teamlist_index in self.teams:
            raise ValueError(f"team slot {team.teamlist_index} already in use")
        self.teams[team.teamlist_index] = team
        self.registries[team.teamlist_index] = WindowRegistry(team.teamlist_index)

    def drop_team(self, team: Team):
        if any(e.team_index == team.teamlist_index for e in self.table):
            raise ValueError(f"team {team.teamlist_index} still owns allocations")
        del self.teams[team.teamlist_index]
        del self.registries[team.teamlist_index]

    # lookups -------------------------------------------------------------

    def lookup(self, segid: int) -> TableEntry:
        if segid == POOL_SEGID and self.pool_entry is not None:
            return self.pool_entry
        if segid == CONTROL_SEGID and self.control_entry is not None:
            return self.control_entry
        return self.table.get(segid)

    def check_range(self, entry: TableEntry, offset: int, nbytes: int):
        if offset < 0 or nbytes < 0 or offset + nbytes > entry.nbytes_per_unit:
            raise OutOfRangeError(
                f"[{offset}, {offset + nbytes}) exceeds {entry.nbytes_per_unit} bytes "
                f"of segid {entry.segid}")

    def is_local(self, unit: int) -> bool:
        return unit // self.units_per_node == self.node_id

    def dereference_local(self, gptr: GlobalPointer, caller: int | None = None,
                          nbytes: int = 0):
        """Return ``(segment, byte index)`` of ``gptr`` or NOT_LOCAL."""
        entry = self.lookup(gptr.segid)
        self.check_range(entry, gptr.offset, nbytes)
        if caller is None or caller == self.me:
            if not self.is_local(gptr.unit):
                return NOT_LOCAL
        elif not topology.same_node(caller, gptr.unit, self.units_per_node):
            return NOT_LOCAL
        part = entry.local_parts.get(gptr.unit)
        if part is None:
            raise NotAMemberError(f"unit {gptr.unit} has no part in segid {gptr.segid}")
        return entry.seg, entry.seg.partition[part][0] + entry.base + gptr.offset

    def dereference_remote(self, gptr: GlobalPointer, nbytes: int = 0) -> tuple[int, int, int]:
        """Return ``(registry index, relative unit, target displacement)``."""
        entry = self.lookup(gptr.segid)
        self.check_range(entry, gptr.offset, nbytes)
        team = self.teams[entry.team_index]
        rel = topology.unit_abs_to_rel(team, gptr.unit)
        return entry.team_index, rel, target_disp(gptr.offset, entry.disp_set, rel)

    def resolve_inbound(self, segid: int, rel: int, disp: int, nbytes: int):
        """Map a displacement-addressed request onto this unit's memory."""
        entry = self.lookup(segid)
        team = self.teams.get(entry.team_index)
        if team is None or rel != team.my_rel:
            raise UnknownSegmentError(f"segid {segid} is not exposed as relative unit {rel}")
        region = self.registries[entry.team_index].lookup(rel, segid)
        if disp < region.disp or disp + nbytes > region.disp + region.length:
            raise OutOfRangeError(
                f"[{disp}, {disp + nbytes}) outside region [{region.disp}, "
                f"{region.disp + region.length})")
        seg = entry.seg
        if seg is None or seg.closed:
            raise UnknownSegmentError(f"segid {segid} is detached")
        return seg, seg.partition[entry.local_parts[self.me]][0] + entry.base + disp - region.disp

    # non-collective pool --------------------------------------------------

    def local_alloc(self, nbytes: int) -> GlobalPointer:
        if nbytes <= 0:
            raise ValueError("allocation size must be positive")
        start = self._pool_cursor
        if start + nbytes > self.pool_bytes:
            raise PoolExhaustedError(
                f"{nbytes} bytes requested, {self.pool_bytes - start} left in pool")
        self._pool_cursor = align_up(start + nbytes)
        self._live[start] = nbytes
        return GlobalPointer(self.me, POOL_SEGID, start)

    def local_free(self, gptr: GlobalPointer):
        if gptr.segid != POOL_SEGID:
            raise ValueError(f"segid {gptr.segid} is collective, use team_memfree")
        if gptr.unit != self.me:
            raise ForeignPointerError(f"pointer owned by unit {gptr.unit}, not {self.me}")
        if gptr.offset in self._live:
            del self._live[gptr.offset]
            self._freed.add(gptr.offset)
        elif gptr.offset in self._freed:
            raise DoubleFreeError(f"pool offset {gptr.offset} already freed")
        else:
            raise ForeignPointerError(f"pool offset {gptr.offset} was never allocated")

    def live_local(self) -> dict[int, int]:
        return dict(self._live)

    def close(self):
        for entry in list(self.table):
            self.table.remove(entry.segid)
            entry.seg.close()
        if self.pool_entry is not None:
            self.pool_entry.seg.close()
            self.pool_entry = self.control_entry = None


# collective operations -----------------------------------------------------
#
# ``rt`` is a :class:`hpgas.runtime.Runtime`; these use its collectives and
# its atomic path to the control words of world unit 0.

def _node_segment(rt, team: Team, segid: int, part_bytes: int) -> SharedSegment:
    """Create (group leader) or map (others) this group's segment."""
    group = team.my_group
    name = segment_name(rt.config.run_id, team.teamlist_index, segid,
                        topology.node_of(rt.me, rt.config.units_per_node))
    seg, err = None, ""
    if rt.me == group[0]:
        try:
            seg = SharedSegment.create(name, part_bytes, len(group))
        except OSError as exc:
            err = f"unit {rt.me}: {exc}"
    _agree_ok(rt, team, err)
    if seg is None:
        try:
            seg = SharedSegment.open(name, part_bytes, len(group))
        except OSError as exc:
            err = f"unit {rt.me}: {exc}"
    _agree_ok(rt, team, err)
    if rt.me == group[0]:
        # every group member holds a mapping now; the name is no longer needed
        seg.unlink()
    return seg


def _agree_ok(rt, team: Team, err: str):
    """Collective error agreement: raise everywhere if anyone failed."""
    msgs = rt.transport.allgather(team, err.encode()[:200].ljust(200))
    failed = [m.rstrip().decode() for m in msgs if m.strip()]
    if failed:
        raise MemoryError("; ".join(failed))


def create_pool(rt, world: Team):
    """Pre-create the non-collective pool window over the world team."""
    mem = rt.memory
    part = CONTROL_BYTES + align_up(mem.pool_bytes)
    seg = _node_segment(rt, world, POOL_SEGID, part)
    reg = mem.registries[world.teamlist_index]
    for rel in range(world.size):
        reg.attach(rel, CONTROL_SEGID, 0, CONTROL_BYTES)
        reg.attach(rel, POOL_SEGID, CONTROL_BYTES, mem.pool_bytes)
    parts = {u: k for k, u in enumerate(world.my_group)}
    mem.control_entry = TableEntry(CONTROL_SEGID, world.teamlist_index, seg,
                                   (0,) * world.size, CONTROL_BYTES, parts, 0)
    mem.pool_entry = TableEntry(POOL_SEGID, world.teamlist_index, seg,
                                (CONTROL_BYTES,) * world.size, mem.pool_bytes, parts,
                                CONTROL_BYTES)


def team_memalloc(rt, team: Team, nbytes_per_unit: int) -> GlobalPointer:
    nbytes = int(nbytes_per_unit)
    if nbytes <= 0:
        raise ValueError("nbytes_per_unit must be positive")
    mem = rt.memory
    proposal = 0
    if team.my_rel == 0:
        proposal = rt.control_fetch_add(SLOT_SEGID, 1) + 1
    votes = [struct.unpack("<QQ", b)
             for b in rt.transport.allgather(team, struct.pack("<QQ", nbytes, proposal))]
    if len({v[0] for v in votes}) != 1:
        raise CollectiveMismatchError(
            f"team {team.teamlist_index} members requested different sizes "
            f"{sorted({v[0] for v in votes})}")
    segid = votes[0][1]

    seg = _node_segment(rt, team, segid, nbytes)
    reg = mem.registries[team.teamlist_index]
    mine = reg.attach_next(team.my_rel, segid, nbytes)
    parts = {u: k for k, u in enumerate(team.my_group)}
    # published before the exchange so early remote requests already resolve
    mem.table.insert(TableEntry(segid, team.teamlist_index, seg, (), nbytes, parts))

    disps = [struct.unpack("<Q", b)[0]
             for b in rt.transport.allgather(team, struct.pack("<Q", mine.disp))]
    for rel, d in enumerate(disps):
        if rel != team.my_rel:
            reg.attach(rel, segid, d, nbytes)
    mem.table.replace(TableEntry(segid, team.teamlist_index, seg, tuple(disps), nbytes, parts))
    return GlobalPointer(team.members[0], segid, 0)


def team_memfree(rt, team: Team, gptr: GlobalPointer):
    mem = rt.memory
    if gptr.segid in mem.retired:
        raise DoubleFreeError(f"segid {gptr.segid} already freed")
    if gptr.segid in (POOL_SEGID, CONTROL_SEGID):
        raise ValueError("the non-collective pool is released by local_free")
    entry = mem.table.get(gptr.segid)
    if entry.team_index != team.teamlist_index:
        raise ValueError(f"segid {gptr.segid} belongs to team {entry.team_index}, "
                         f"not {team.teamlist_index}")
    votes = rt.transport.allgather(team, struct.pack("<I", gptr.segid))
    if len(set(votes)) != 1:
        raise CollectiveMismatchError(f"team {team.teamlist_index} freed different segids")
    mem.table.remove(gptr.segid)
    mem.registries[team.teamlist_index].detach_segid(gptr.segid)
    mem.retired.add(gptr.segid)
    entry.seg.close()
