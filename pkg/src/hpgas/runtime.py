"""Runtime lifecycle and the process-wide API.

A :class:`Runtime` is one unit's handle on the global address space.  SPMD
programs normally call :func:`init` once, which reads the launcher's
environment, and then use the module-level functions.  Several ``Runtime``
objects may also live in one process (one per thread), which is how
:func:`hpgas.launcher.run_threads` runs small clusters inside a test.
"""

from __future__ import annotations

import collections
import hashlib
import socket
import struct
import sys

from . import global_memory, rma, topology
from .errors import (AlreadyInitializedError, CollectiveMismatchError,
                     NotInitializedError)
from .global_memory import CONTROL_SEGID, SLOT_TEAM, GlobalPointer, GlobalMemory
from .segment import OP_ADD
from .topology import RunConfig, Team
from .transport import DEFAULT_TIMEOUT, EndpointDirectory, Transport, serve

# The progress agent must get the interpreter quickly while the
# application thread spins in a local-path loop.
SWITCH_INTERVAL = 2e-4


def listen_socket(host: str = "127.0.0.1", port: int = 0, backlog: int = 128) -> socket.socket:
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    s.bind((host, port))
    s.listen(backlog)
    return s


class Runtime:
    def __init__(self, config: RunConfig, listen_sock: socket.socket | None = None,
                 timeout: float = DEFAULT_TIMEOUT, collective_timeout: float | None = None):
        self.config = config
        self.me = config.unit
        self.stats = collections.Counter()
        self.memory = GlobalMemory(self.me, config.units_per_node, config.run_id,
                                   config.pool_bytes)
        if listen_sock is None:
            if config.listen_fd is not None:
                listen_sock = socket.socket(fileno=config.listen_fd)
            else:
                d = EndpointDirectory.wait(config.endpoint_file, config.world_size, timeout)
                ep = d[self.me]
                listen_sock = listen_socket(ep.host, ep.port)
        self.transport = Transport(self.me, config.world_size, config.endpoint_file,
                                   listen_sock, self._serve, timeout, collective_timeout)
        self._world: Team | None = None
        self._state = "new"

    # lifecycle ---------------------------------------------------------------

    def init(self) -> "Runtime":
        if self._state != "new":
            raise AlreadyInitializedError(f"runtime of unit {self.me} is {self._state}")
        if sys.getswitchinterval() > SWITCH_INTERVAL:
            sys.setswitchinterval(SWITCH_INTERVAL)
        self.transport.start()
        self.transport.rendezvous()
        cfg = self.config
        world = Team(0, tuple(range(cfg.world_size)), cfg.units_per_node, self.me)
        self.memory.add_team(world)
        self._world = world
        global_memory.create_pool(self, world)
        self._state = "running"
        return self

    def finalize(self):
        if self._state != "running":
            raise NotInitializedError(f"runtime of unit {self.me} is {self._state}")
        try:
            self.transport.barrier(self._world)
        finally:
            self._state = "finalized"
            self.transport.close()
            self.memory.close()

    @property
    def running(self) -> bool:
        return self._state == "running"

    def _require(self):
        if self._state != "running":
            raise NotInitializedError(
                f"runtime of unit {self.me} is {self._state}, call init() first")

    def _serve(self, request):
        return serve(request, self.memory.resolve_inbound)

    # topology ------------------------------------------------------------------

    def world(self) -> Team:
        self._require()
        return self._world

    @property
    def world_size(self) -> int:
        return self.config.world_size

    def same_node(self, a: int, b: int) -> bool:
        return topology.same_node(a, b, self.config.units_per_node)

    def team_create(self, parent: Team, subset) -> Team | None:
        """Collective over ``parent``; returns None on units outside ``subset``."""
        self._require()
        members = topology.check_subset(parent, subset)
        digest = hashlib.sha256(repr(members).encode()).digest()[:8]
        proposal = 0
        if parent.my_rel == 0:
            proposal = self.control_fetch_add(SLOT_TEAM, 1) + 1
        votes = self.transport.allgather(parent, digest + struct.pack("<Q", proposal))
        if len({v[:8] for v in votes}) != 1:
            raise CollectiveMismatchError(
                f"members of team {parent.teamlist_index} passed different subsets")
        index = struct.unpack("<Q", votes[0][8:])[0]
        if self.me not in members:
            return None
        team = Team(index, members, self.config.units_per_node, self.me)
        self.memory.add_team(team)
        return team

    def team_destroy(self, team: Team):
        self._require()
        if team.teamlist_index == 0:
            raise ValueError("the world team cannot be destroyed")
        self.transport.barrier(team)
        self.memory.drop_team(team)

    # memory ------------------------------------------------------------------

    def team_memalloc(self, team: Team, nbytes_per_unit: int) -> GlobalPointer:
        self._require()
        return global_memory.team_memalloc(self, team, nbytes_per_unit)

    def team_memfree(self, team: Team, gptr: GlobalPointer):
        self._require()
        global_memory.team_memfree(self, team, gptr)

    def local_alloc(self, nbytes: int) -> GlobalPointer:
        self._require()
        return self.memory.local_alloc(nbytes)

    def local_free(self, gptr: GlobalPointer):
        self._require()
        self.memory.local_free(gptr)

    def dereference_local(self, gptr: GlobalPointer, caller: int | None = None,
                          nbytes: int = 0):
        self._require()
        return self.memory.dereference_local(gptr, caller, nbytes)

    def dereference_remote(self, gptr: GlobalPointer):
        self._require()
        return self.memory.dereference_remote(gptr)

    def local_view(self, gptr: GlobalPointer, nbytes: int) -> memoryview:
        """Writable view of ``nbytes`` at a same-node ``gptr``."""
        self._require()
        ref = self.memory.dereference_local(gptr, nbytes=nbytes)
        if ref is None:
            raise ValueError(f"unit {gptr.unit} does not share memory with unit {self.me}")
        seg, index = ref
        return seg.buf[index:index + nbytes]

    def control_fetch_add(self, slot: int, value: int) -> int:
        return rma.atomic_op64(self, GlobalPointer(0, CONTROL_SEGID, slot * 8), OP_ADD, value)

    # communication -------------------------------------------------------------

    def put_blocking(self, gptr, src, nbytes=None, path=None):
        self._require()
        rma.put_blocking(self, gptr, src, nbytes, path)

    def get_blocking(self, gptr, dst=None, nbytes=None, path=None):
        self._require()
        return rma.get_blocking(self, gptr, dst, nbytes, path)

    def atomic_op64(self, gptr, op, operand, path=None) -> int:
        self._require()
        return rma.atomic_op64(self, gptr, op, operand, path)

    def barrier(self, team: Team | None = None):
        self._require()
        rma.barrier(self, team or self._world)

    def allgather(self, data, team: Team | None = None) -> list[bytes]:
        self._require()
        return self.transport.allgather(team or self._world, data)


_current: Runtime | None = None


def init(config: RunConfig | None = None, **kwargs) -> Runtime:
    global _current
    if _current is not None:
        raise AlreadyInitializedError("runtime already initialized in this process")
    rt = Runtime(config or RunConfig.from_env(), **kwargs)
    rt.init()
    _current = rt
    return rt


def finalize():
    global _current
    rt = current()
    _current = None
    rt.finalize()


def current() -> Runtime:
    if _current is None:
        raise NotInitializedError("hpgas.init() has not been called")
    return _current


def _forward(name):
    def call(*args, **kwargs):
        return getattr(current(), name)(*args, **kwargs)
    call.__name__ = name
    call.__doc__ = getattr(Runtime, name).__doc__
    return call


world = _forward("world")
team_create = _forward("team_create")
team_destroy = _forward("team_destroy")
team_memalloc = _forward("team_memalloc")
team_memfree = _forward("team_memfree")
local_alloc = _forward("local_alloc")
local_free = _forward("local_free")
dereference_local = _forward("dereference_local")
dereference_remote = _forward("dereference_remote")
local_view = _forward("local_view")
put_blocking = _forward("put_blocking")
get_blocking = _forward("get_blocking")
atomic_op64 = _forward("atomic_op64")
barrier = _forward("barrier")
allgather = _forward("allgather")
