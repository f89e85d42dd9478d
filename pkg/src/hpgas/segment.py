"""Named shared-memory segments partitioned per unit, plus 64-bit atomics.

Segments are plain files in ``/dev/shm`` mapped with :mod:`mmap`.  The
multiprocessing ``SharedMemory`` class is avoided on purpose: its resource
tracker unlinks segments behind our back when any one process exits.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import glob
import logging
import mmap
import os

from .errors import AlignmentError, OutOfRangeError

log = logging.getLogger(__name__)

SHM_DIR = "/dev/shm"
ALIGN = 8
NAME_PREFIX = "hpgas"

OP_ADD = "add"
OP_XOR = "xor"

_SEQ_CST = 5


def align_up(n: int, a: int = ALIGN) -> int:
    return (n + a - 1) // a * a


def segment_name(run_id: str, team_index: int, segid: int, node_id: int) -> str:
    return f"{NAME_PREFIX}.{run_id}.{team_index}.{segid}.{node_id}"


def list_run_objects(run_id: str) -> list[str]:
    return sorted(os.path.basename(p)
                  for p in glob.glob(os.path.join(SHM_DIR, f"{NAME_PREFIX}.{run_id}.*")))


def sweep_run_objects(run_id: str) -> list[str]:
    """Unlink every shared-memory object left behind by ``run_id``."""
    removed = []
    for name in list_run_objects(run_id):
        try:
            os.unlink(os.path.join(SHM_DIR, name))
            removed.append(name)
        except FileNotFoundError:
            pass
    return removed


def _load_atomics():
    path = ctypes.util.find_library("atomic") or "libatomic.so.1"
    lib = ctypes.CDLL(path)
    fns = {}
    for op in (OP_ADD, OP_XOR):
        f = getattr(lib, f"__atomic_fetch_{op}_8")
        f.restype = ctypes.c_uint64
        f.argtypes = [ctypes.c_void_p, ctypes.c_uint64, ctypes.c_int]
        fns[op] = f
    return fns


_ATOMICS = _load_atomics()


class SharedSegment:
    """One mapped shared-memory object, split into per-unit partitions.

    ``partition[k]`` is the ``(offset, length)`` of the k-th unit of the
    owning locality group.  Every partition starts on an 8-byte boundary.
    """

    def __init__(self, name: str, fd: int, total_bytes: int, part_bytes: int, nparts: int):
        self.name = name
        self.total_bytes = total_bytes
        self.partition = [(k * part_bytes, part_bytes) for k in range(nparts)]
        self._mm = mmap.mmap(fd, total_bytes)
        os.close(fd)
        self.buf = memoryview(self._mm)
        self._cbuf = (ctypes.c_char * total_bytes).from_buffer(self._mm)
        self.base = ctypes.addressof(self._cbuf)
        self.unlinked = False

    @staticmethod
    def layout(part_bytes: int, nparts: int) -> tuple[int, int]:
        part = align_up(max(part_bytes, 1))
        return part, part * nparts

    @classmethod
    def create(cls, name: str, part_bytes: int, nparts: int) -> "SharedSegment":
        part, total = cls.layout(part_bytes, nparts)
        fd = os.open(os.path.join(SHM_DIR, name), os.O_CREAT | os.O_EXCL | os.O_RDWR, 0o600)
        try:
            os.ftruncate(fd, total)
        except OSError:
            os.close(fd)
            os.unlink(os.path.join(SHM_DIR, name))
            raise
        return cls(name, fd, total, part, nparts)

    @classmethod
    def open(cls, name: str, part_bytes: int, nparts: int) -> "SharedSegment":
        part, total = cls.layout(part_bytes, nparts)
        fd = os.open(os.path.join(SHM_DIR, name), os.O_RDWR)
        size = os.fstat(fd).st_size
        if size != total:
            os.close(fd)
            raise ValueError(f"segment {name} has {size} bytes, expected {total}")
        return cls(name, fd, total, part, nparts)

    def unlink(self):
        if not self.unlinked:
            try:
                os.unlink(os.path.join(SHM_DIR, self.name))
            except FileNotFoundError:
                pass
            self.unlinked = True

    def close(self):
        if self._mm is None:
            return
        self.buf.release()
        del self._cbuf
        try:
            self._mm.close()
        except BufferError:
            # a caller still holds a view; the mapping goes away with it
            log.debug("segment %s still exported at close", self.name)
        self._mm = None

    @property
    def closed(self) -> bool:
        return self._mm is None

    def check(self, index: int, nbytes: int):
        if index < 0 or nbytes < 0 or index + nbytes > self.total_bytes:
            raise OutOfRangeError(
                f"[{index}, {index + nbytes}) outside segment of {self.total_bytes} bytes")

    def write(self, index: int, data) -> None:
        n = len(data)
        self.buf[index:index + n] = data

    def read(self, index: int, nbytes: int, out=None):
        if out is None:
            return bytes(self.buf[index:index + nbytes])
        out[:nbytes] = self.buf[index:index + nbytes]
        return out

    def fetch_op(self, index: int, op: str, operand: int) -> int:
        if index % ALIGN:
            raise AlignmentError(f"atomic target {index} is not 8-byte aligned")
        self.check(index, 8)
        return _ATOMICS[op](self.base + index, operand & 0xFFFFFFFFFFFFFFFF, _SEQ_CST)

    def __repr__(self):
        return f"SharedSegment({self.name!r}, {self.total_bytes} bytes)"
