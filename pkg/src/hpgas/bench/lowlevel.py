"""Blocking put/get latency, by message size and by target distance."""

from __future__ import annotations

import os

from ..rma import LOCAL, REMOTE
from ..topology import node_of
from .common import BenchConfig, summarize, time_interleaved

LATENCY_HEADER = ["op", "size", "path", "reps", "median_ns", "mean_ns", "p99_ns"]
DISTANCE_HEADER = ["op", "target", "node", "size", "path", "reps", "median_ns", "mean_ns",
                   "p99_ns", "local_ops", "remote_ops"]


def _op(rt, op, gptr, buf, size, path):
    if op == "put":
        return lambda: rt.put_blocking(gptr, buf, size, path)
    return lambda: rt.get_blocking(gptr, buf, size, path)


def bench_latency(rt, config: BenchConfig) -> list[dict]:
    """Unit 0 times blocking put/get into unit 1 for every size.

    On a shared node both routes are measured: "shm" (load/store) and
    "transport" (forced through the progress agent over loopback).
    """
    if rt.world_size != 2:
        raise ValueError(f"latency benchmark needs exactly 2 units, got {rt.world_size}")
    world = rt.world()
    maxsize = max(config.sizes)
    g = rt.team_memalloc(world, maxsize)
    rows = []
    if rt.me == 0:
        target = g.at_unit(1)
        buf = bytearray(os.urandom(maxsize))
        if rt.same_node(0, 1):
            paths = [("shm", LOCAL), ("transport", REMOTE)]
        else:
            paths = [("transport", None)]
        cases = [((op, size, label), _op(rt, op, target, buf, size, path),
                  config.reps_for(size))
                 for size in config.sizes for label, path in paths for op in ("put", "get")]
        samples = time_interleaved(cases, config.warmup)
        for (op, size, label), _, reps in cases:
            rows.append({"op": op, "size": size, "path": label, "reps": reps,
                         **summarize(samples[op, size, label])})
    rt.barrier()
    rt.team_memfree(world, g)
    return rows


def bench_distance(rt, config: BenchConfig) -> list[dict]:
    """Unit 0 times put/get to every other unit; route read back from counters."""
    upn = rt.config.units_per_node
    if rt.world_size < 2 * upn:
        raise ValueError(f"distance benchmark needs at least two nodes "
                         f"({2 * upn} units), got {rt.world_size}")
    sizes = config.sizes
    world = rt.world()
    g = rt.team_memalloc(world, max(sizes))
    rows = []
    if rt.me == 0:
        buf = bytearray(os.urandom(max(sizes)))
        stats = rt.stats

        def snapshot():
            return (stats["put_local"] + stats["get_local"],
                    stats["put_remote"] + stats["get_remote"])

        cases = [((target, size, op), _op(rt, op, g.at_unit(target), buf, size, None),
                  config.reps_for(size))
                 for target in range(1, rt.world_size) for size in sizes
                 for op in ("put", "get")]
        samples, counts = time_interleaved(cases, config.warmup, snapshot=snapshot)
        for (target, size, op), _, reps in cases:
            local, remote = counts[target, size, op]
            rows.append({"op": op, "target": target, "node": node_of(target, upn),
                         "size": size, "path": "local" if local else "remote",
                         "reps": reps, **summarize(samples[target, size, op]),
                         "local_ops": local, "remote_ops": remote})
    rt.barrier()
    rt.team_memfree(world, g)
    return rows
