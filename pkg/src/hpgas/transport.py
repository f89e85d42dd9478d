"""Emulated passive-target RMA over TCP.

Each process runs one progress agent thread that accepts connections from
peers and serves their requests against local memory, so the application
thread of the target never takes part in a transfer.  The application thread
owns one lazily opened outbound connection per peer and waits for the reply
of every RMA request before issuing the next one.

Barrier (dissemination) and allgather (ring) use one-way messages over the
same connections; the agent drops them into a mailbox keyed by
``(kind, team index, sequence number, round or block)``.
"""

from __future__ import annotations

import itertools
import logging
import os
import selectors
import socket
import struct
import threading
import time
from dataclasses import dataclass

from .errors import (AlignmentError, CollectiveMismatchError, OutOfRangeError,
                     RendezvousTimeout, TransportError, UnknownSegmentError)
from .segment import OP_ADD, OP_XOR
from .wire import REPLY, REQUEST, ONE_WAY, Op, ProtocolError, RmaReply, RmaRequest, Status

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
_SMALL = 64 * 1024


@dataclass(frozen=True)
class Endpoint:
    unit: int
    node_id: int
    host: str
    port: int


class EndpointDirectory:
    """``<abs_unit> <node_id> <host> <port>`` per line; ``#`` lines are comments."""

    def __init__(self, run_id: str, entries: dict[int, Endpoint]):
        self.run_id = run_id
        self.entries = dict(entries)

    def __getitem__(self, unit: int) -> Endpoint:
        return self.entries[unit]

    def __len__(self) -> int:
        return len(self.entries)

    def dumps(self) -> str:
        lines = [f"# hpgas endpoints run_id={self.run_id}"]
        lines += [f"{e.unit} {e.node_id} {e.host} {e.port}"
                  for e in sorted(self.entries.values(), key=lambda e: e.unit)]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, run_id: str = "") -> "EndpointDirectory":
        entries = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("run_id="):
                        run_id = tok.split("=", 1)[1]
                continue
            unit, node, host, port = line.split()
            entries[int(unit)] = Endpoint(int(unit), int(node), host, int(port))
        return cls(run_id, entries)

    def write(self, path: str):
        tmp = f"{path}.tmp{os.getpid()}"
        with open(tmp, "w") as f:
            f.write(self.dumps())
        os.replace(tmp, path)

    @classmethod
    def wait(cls, path: str, world_size: int, timeout: float = DEFAULT_TIMEOUT) -> "EndpointDirectory":
        """Block until ``path`` lists all ``world_size`` units."""
        deadline = time.monotonic() + timeout
        while True:
            try:
                with open(path) as f:
                    d = cls.loads(f.read())
                if all(u in d.entries for u in range(world_size)):
                    return d
            except FileNotFoundError:
                pass
            if time.monotonic() > deadline:
                raise RendezvousTimeout(
                    f"endpoint directory {path} incomplete after {timeout:.0f} s")
            time.sleep(0.01)


def recv_exact(sock: socket.socket, n: int) -> bytearray:
    buf = bytearray(n)
    recv_into_exact(sock, memoryview(buf))
    return buf


def recv_into_exact(sock: socket.socket, view: memoryview):
    got, n = 0, len(view)
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise EOFError("connection closed by peer")
        got += k


def _send(sock: socket.socket, header: bytes, payload=b""):
    if len(payload) <= _SMALL:
        sock.sendall(header + bytes(payload))
    else:
        sock.sendall(header)
        sock.sendall(payload)


def serve(request: RmaRequest, resolve) -> RmaReply:
    """Execute one RMA request against local memory.

    ``resolve(segid, rel, disp, nbytes)`` returns ``(segment, byte index)``
    or raises UnknownSegmentError / OutOfRangeError.
    """
    op = request.opcode
    nbytes = 8 if op in (Op.ATOMIC_ADD, Op.ATOMIC_XOR) else request.nbytes
    try:
        seg, index = resolve(request.segid, request.target_rel_unit,
                             request.target_disp, nbytes)
        if op == Op.PUT:
            seg.write(index, request.payload)
            return RmaReply(request.tag, Status.OK)
        if op == Op.GET:
            return RmaReply(request.tag, Status.OK, seg.read(index, nbytes))
        if op in (Op.ATOMIC_ADD, Op.ATOMIC_XOR):
            operand = struct.unpack("<Q", request.payload)[0]
            old = seg.fetch_op(index, OP_ADD if op == Op.ATOMIC_ADD else OP_XOR, operand)
            return RmaReply(request.tag, Status.OK, struct.pack("<Q", old))
    except (OutOfRangeError, AlignmentError):
        return RmaReply(request.tag, Status.ERR_RANGE)
    except (UnknownSegmentError, ValueError):
        # ValueError: the segment was released while the request was in flight
        return RmaReply(request.tag, Status.ERR_SEGID)
    raise ProtocolError(f"{op.name} is not an RMA request")


class _Mailbox:
    def __init__(self):
        self._cv = threading.Condition()
        self._box: dict[tuple, bytes] = {}
        self.broken: str | None = None

    def post(self, key: tuple, payload: bytes):
        with self._cv:
            self._box[key] = payload
            self._cv.notify_all()

    def fail(self, reason: str):
        with self._cv:
            self.broken = reason
            self._cv.notify_all()

    def take(self, key: tuple, timeout: float | None) -> bytes:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while key not in self._box:
                if self.broken:
                    raise TransportError(self.broken)
                wait = 1.0 if deadline is None else min(1.0, deadline - time.monotonic())
                if wait <= 0:
                    raise TransportError(f"collective message {key} timed out")
                self._cv.wait(wait)
            return self._box.pop(key)


class Transport:
    """Connection mesh, progress agent and collectives of one unit.

    ``handler(request) -> RmaReply`` is invoked on the agent thread for
    PUT / GET / atomic requests.
    """

    def __init__(self, me: int, world_size: int, endpoint_file: str,
                 listen_sock: socket.socket, handler, timeout: float = DEFAULT_TIMEOUT,
                 collective_timeout: float | None = None):
        self.me = me
        self.world_size = world_size
        self.endpoint_file = endpoint_file
        self.timeout = timeout
        self.collective_timeout = collective_timeout
        self._handler = handler
        self._lsock = listen_sock
        self._lsock.setblocking(False)
        self._conns: dict[int, socket.socket] = {}
        self._tags = itertools.count(1)
        self._seq: dict[int, int] = {}
        self._mailbox = _Mailbox()
        self._wake_r, self._wake_w = socket.socketpair()
        self._closing = False
        self.directory: EndpointDirectory | None = None
        self.connections_opened = 0
        self.requests_served = 0
        self._agent = threading.Thread(target=self._run_agent, name=f"hpgas-agent-{me}",
                                       daemon=True)

    # lifecycle -------------------------------------------------------------

    def start(self):
        self._agent.start()

    def rendezvous(self) -> EndpointDirectory:
        self.directory = EndpointDirectory.wait(self.endpoint_file, self.world_size, self.timeout)
        return self.directory

    def abort(self, reason: str):
        """Wake any collective wait with ``reason`` as a TransportError."""
        self._mailbox.fail(reason)

    def close(self):
        if self._closing:
            return
        self._closing = True
        for s in self._conns.values():
            try:
                s.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            s.close()
        self._conns.clear()
        try:
            self._wake_w.send(b"x")
        except OSError:
            pass
        if self._agent.is_alive():
            self._agent.join(timeout=5)
        self._wake_w.close()
        self._wake_r.close()
        self._lsock.close()

    # outbound ----------------------------------------------------------------

    def connection(self, unit: int) -> socket.socket:
        s = self._conns.get(unit)
        if s is not None:
            return s
        if self.directory is None:
            raise TransportError("rendezvous has not completed")
        ep = self.directory[unit]
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                s = socket.create_connection((ep.host, ep.port), timeout=self.timeout)
                break
            except (ConnectionRefusedError, socket.timeout) as exc:
                if time.monotonic() > deadline:
                    raise RendezvousTimeout(f"unit {unit} at {ep.host}:{ep.port}: {exc}") from exc
                time.sleep(0.01)
        s.settimeout(None)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._conns[unit] = s
        self.connections_opened += 1
        return s

    @property
    def outbound_peers(self) -> list[int]:
        return sorted(self._conns)

    def next_tag(self) -> int:
        return next(self._tags)

    def request(self, unit: int, req: RmaRequest, into=None) -> RmaReply:
        """Send ``req`` to ``unit`` and block until its reply arrives.

        With ``into`` (a writable buffer) GET data lands there directly and
        the returned reply has an empty payload.
        """
        sock = self.connection(unit)
        try:
            _send(sock, req.header(), req.payload)
            tag, status, nbytes = RmaReply.decode_header(recv_exact(sock, REPLY.size))
            if tag != req.tag:
                raise ProtocolError(f"reply tag {tag} does not match request {req.tag}")
            if into is not None and status == Status.OK:
                recv_into_exact(sock, memoryview(into).cast("B")[:nbytes])
                return RmaReply(tag, status)
            payload = bytes(recv_exact(sock, nbytes)) if nbytes else b""
        except (OSError, EOFError) as exc:
            self._conns.pop(unit, None)
            raise TransportError(f"request to unit {unit} failed: {exc}") from exc
        return RmaReply(tag, status, payload)

    def send_oneway(self, unit: int, req: RmaRequest):
        if req.opcode not in ONE_WAY:
            raise ValueError(f"{req.opcode.name} expects a reply")
        if unit == self.me:
            self._deliver(req.opcode, req.segid, req.target_rel_unit, req.target_disp,
                          bytes(req.payload))
            return
        try:
            _send(self.connection(unit), req.header(), req.payload)
        except OSError as exc:
            raise TransportError(f"send to unit {unit} failed: {exc}") from exc

    # collectives -------------------------------------------------------------

    def _next_seq(self, team_index: int) -> int:
        seq = self._seq.get(team_index, 0)
        self._seq[team_index] = seq + 1
        return seq

    def barrier(self, team):
        n = team.size
        if n == 1:
            return
        seq = self._next_seq(team.teamlist_index)
        r = team.my_rel
        dist, rnd = 1, 0
        while dist < n:
            peer = team.members[(r + dist) % n]
            self.send_oneway(peer, RmaRequest(Op.BARRIER_TOKEN, team.teamlist_index, rnd,
                                              seq, 0, 0, origin=self.me))
            self._mailbox.take(("b", team.teamlist_index, seq, rnd), self.collective_timeout)
            dist *= 2
            rnd += 1

    def allgather(self, team, data) -> list[bytes]:
        """Ring allgather; returns one block per relative unit."""
        data = bytes(data)
        n = team.size
        if n == 1:
            return [data]
        seq = self._next_seq(team.teamlist_index)
        r = team.my_rel
        right = team.members[(r + 1) % n]
        blocks: list[bytes | None] = [None] * n
        blocks[r] = data
        for step in range(n - 1):
            out = (r - step) % n
            self.send_oneway(right, RmaRequest(Op.ALLGATHER_PART, team.teamlist_index, out,
                                               seq, len(blocks[out]), 0, blocks[out],
                                               origin=self.me))
            into = (r - step - 1) % n
            blocks[into] = self._mailbox.take(("g", team.teamlist_index, seq, into),
                                              self.collective_timeout)
        sizes = {len(b) for b in blocks}
        if len(sizes) != 1:
            raise CollectiveMismatchError(
                f"allgather over team {team.teamlist_index} got block sizes {sorted(sizes)}")
        return blocks

    # progress agent ------------------------------------------------------------

    def _deliver(self, op, team_index, rel, seq, payload):
        kind = "b" if op == Op.BARRIER_TOKEN else "g"
        self._mailbox.post((kind, team_index, seq, rel), payload)

    def _run_agent(self):
        sel = selectors.DefaultSelector()
        sel.register(self._lsock, selectors.EVENT_READ, "listen")
        sel.register(self._wake_r, selectors.EVENT_READ, "wake")
        try:
            while not self._closing:
                for key, _ in sel.select():
                    if key.data == "wake":
                        return
                    if key.data == "listen":
                        try:
                            conn, _ = self._lsock.accept()
                        except BlockingIOError:
                            continue
                        conn.setblocking(True)
                        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                        sel.register(conn, selectors.EVENT_READ, "conn")
                        continue
                    conn = key.fileobj
                    try:
                        self._service(conn)
                    except (EOFError, ConnectionError):
                        sel.unregister(conn)
                        conn.close()
                    except ProtocolError as exc:
                        log.error("unit %d: dropping connection: %s", self.me, exc)
                        sel.unregister(conn)
                        conn.close()
        except Exception as exc:
            if not self._closing:
                log.exception("unit %d: progress agent died", self.me)
                self._mailbox.fail(f"progress agent of unit {self.me} died: {exc}")
        finally:
            for key in list(sel.get_map().values()):
                if key.data == "conn":
                    key.fileobj.close()
            sel.close()

    def _service(self, conn: socket.socket):
        op, segid, rel, origin, disp, nbytes, tag = RmaRequest.decode_header(
            recv_exact(conn, REQUEST.size))
        req_len = 8 if op in (Op.ATOMIC_ADD, Op.ATOMIC_XOR) else (
            nbytes if op in (Op.PUT, Op.ALLGATHER_PART) else 0)
        payload = bytes(recv_exact(conn, req_len)) if req_len else b""
        if op in ONE_WAY:
            self._deliver(op, segid, rel, disp, payload)
            return
        reply = self._handler(RmaRequest(op, segid, rel, disp, nbytes, tag, payload, origin))
        self.requests_served += 1
        _send(conn, reply.header(), reply.payload)
