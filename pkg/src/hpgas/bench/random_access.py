"""HPCC-style Random Access: XOR updates of random words of a distributed table.

Unit ``u`` holds words ``[u * W, (u + 1) * W)`` of a ``P * W`` word table,
initialised to their global index.  Each unit draws values from its own
xorshift64 stream; a value ``v`` updates word ``v mod (P * W)`` with
``table ^= v`` through :func:`atomic_op64`.  XOR commutes, so the final
table is independent of interleaving and can be checked by replaying every
stream serially.
"""

from __future__ import annotations

import struct
import time

import numpy as np

from ..global_memory import GlobalPointer
from ..rma import atomic_op64
from ..segment import OP_XOR
from .common import BenchConfig

MASK = (1 << 64) - 1
HEADER = ["units", "units_per_node", "table_bits", "updates_per_unit", "total_updates",
          "seconds", "gups", "verified", "mismatches"]


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return x ^ (x >> 31)


def stream_seed(seed: int, unit: int) -> int:
    return splitmix64((seed << 32) ^ unit) or 1


def xorshift64(x: int) -> int:
    x ^= (x << 13) & MASK
    x ^= x >> 7
    x ^= (x << 17) & MASK
    return x


def stream(seed: int, unit: int, count: int) -> np.ndarray:
    out = np.empty(count, dtype=np.uint64)
    x = stream_seed(seed, unit)
    for i in range(count):
        x ^= (x << 13) & MASK
        x ^= x >> 7
        x ^= (x << 17) & MASK
        out[i] = x
    return out


def replay(seed: int, nunits: int, updates: int, total_words: int) -> np.ndarray:
    """Serial oracle: the table after every unit's stream has been applied."""
    table = np.arange(total_words, dtype=np.uint64)
    for u in range(nunits):
        vals = stream(seed, u, updates)
        np.bitwise_xor.at(table, vals % np.uint64(total_words), vals)
    return table


def default_updates(nunits: int, table_bits: int) -> int:
    return 4 * nunits * (1 << table_bits)


def _run_updates(rt, segid: int, bits: int, total: int, x: int, count: int):
    low = (1 << bits) - 1
    for _ in range(count):
        x ^= (x << 13) & MASK
        x ^= x >> 7
        x ^= (x << 17) & MASK
        idx = x % total
        atomic_op64(rt, GlobalPointer(idx >> bits, segid, (idx & low) << 3), OP_XOR, x)


def bench_random_access(rt, config: BenchConfig) -> dict:
    world = rt.world()
    nunits = rt.world_size
    bits = config.table_bits
    words = 1 << bits
    total = nunits * words
    updates = config.updates if config.updates is not None else default_updates(nunits, bits)

    g = rt.team_memalloc(world, words * 8)
    view = rt.local_view(g.at_unit(rt.me), words * 8)
    mine = np.frombuffer(view, dtype=np.uint64)
    mine[:] = np.arange(rt.me * words, (rt.me + 1) * words, dtype=np.uint64)
    del mine
    view.release()
    rt.barrier()

    t0 = time.perf_counter()
    _run_updates(rt, g.segid, bits, total, stream_seed(config.seed, rt.me), updates)
    elapsed = time.perf_counter() - t0
    rt.barrier()
    seconds = max(struct.unpack("<d", b)[0]
                  for b in rt.allgather(struct.pack("<d", elapsed)))

    mismatches = 0
    if rt.me == 0:
        expect = replay(config.seed, nunits, updates, total)
        got = np.empty(words, dtype=np.uint64)
        for u in range(nunits):
            rt.get_blocking(g.at_unit(u), got)
            mismatches += int(np.count_nonzero(got != expect[u * words:(u + 1) * words]))
    verdict = rt.allgather(struct.pack("<q", mismatches))
    mismatches = struct.unpack("<q", verdict[0])[0]
    rt.team_memfree(world, g)
    return {"units": nunits, "units_per_node": rt.config.units_per_node, "table_bits": bits,
            "updates_per_unit": updates, "total_updates": updates * nunits,
            "seconds": seconds, "gups": updates * nunits / seconds / 1e9 if seconds else 0.0,
            "verified": mismatches == 0, "mismatches": mismatches}
