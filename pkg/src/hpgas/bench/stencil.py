"""Five-point stencil on an N x N float32 grid, Gauss-Seidel, row-block decomposed.

Each unit owns ``N / P`` consecutive rows, stored with one halo row above and
one below in a collective allocation.  Per iteration every unit puts its first
owned row into the upper neighbour's bottom halo and its last owned row into
the lower neighbour's top halo, waits at a barrier and sweeps its rows in
place.  Inside a block the sweep is Gauss-Seidel; across blocks it sees the
neighbour's values of the previous iteration.

Boundary cells are fixed at 1.0, the interior starts at 0.0.
"""

from __future__ import annotations

import struct
import time

import numpy as np
from scipy.signal import lfilter

from .common import BenchConfig

HEADER = ["numprocs", "units_per_node", "n", "eps", "iterations", "seconds", "bytes_per_iter",
          "expected_bytes_per_iter", "local_puts", "remote_puts", "converged",
          "serial_iterations", "max_abs_err"]

_A = np.array([1.0, -0.25])
_B = np.array([1.0])


def halo_bytes(n: int, numprocs: int) -> int:
    return 4 * n * (2 * numprocs - 2)


def initial_rows(n: int, first: int, count: int) -> np.ndarray:
    """Global rows ``[first, first + count)`` of the initial grid."""
    rows = np.zeros((count, n), dtype=np.float32)
    rows[:, 0] = rows[:, -1] = 1.0
    for k in range(count):
        if first + k in (0, n - 1):
            rows[k, :] = 1.0
    return rows


def sweep(u: np.ndarray, lo: int, hi: int) -> float:
    """Gauss-Seidel over rows ``[lo, hi)`` and interior columns of ``u``, in place.

    Along a row, new = 0.25 * (north_new + south_old + east_old + west_new)
    is a first-order recurrence in the west neighbour, solved with lfilter.
    Returns the largest absolute change.
    """
    delta = 0.0
    for i in range(lo, hi):
        b = 0.25 * (u[i - 1, 1:-1].astype(np.float64) + u[i + 1, 1:-1] + u[i, 2:])
        b[0] += 0.25 * float(u[i, 0])
        new = lfilter(_B, _A, b).astype(np.float32)
        d = float(np.max(np.abs(new - u[i, 1:-1])))
        if d > delta:
            delta = d
        u[i, 1:-1] = new
    return delta


def sweep_bounds(n: int, rank: int, nprocs: int) -> tuple[int, int]:
    """Local rows (1-based, halo at 0) that hold updatable cells."""
    rows = n // nprocs
    lo = 2 if rank == 0 else 1
    hi = rows if rank == nprocs - 1 else rows + 1
    return lo, hi


def solve_serial(n: int, eps: float, max_iters: int) -> tuple[np.ndarray, int]:
    u = np.zeros((n + 2, n), dtype=np.float32)
    u[1:-1] = initial_rows(n, 0, n)
    lo, hi = sweep_bounds(n, 0, 1)
    for it in range(1, max_iters + 1):
        if sweep(u, lo, hi) < eps:
            break
    return u[1:-1].copy(), it


def bench_stencil(rt, config: BenchConfig) -> dict:
    n, eps = config.n, config.eps
    nprocs, me = rt.world_size, rt.me
    if n % nprocs:
        raise ValueError(f"grid dimension {n} is not divisible by {nprocs} units")
    rows = n // nprocs
    if n < 3:
        raise ValueError("grid must be at least 3 x 3")
    world = rt.world()
    row_bytes = 4 * n
    g = rt.team_memalloc(world, (rows + 2) * row_bytes)
    view = rt.local_view(g.at_unit(me), (rows + 2) * row_bytes)
    u = np.frombuffer(view, dtype=np.float32).reshape(rows + 2, n)
    u[:] = 0.0
    u[1:-1] = initial_rows(n, me * rows, rows)
    lo, hi = sweep_bounds(n, me, nprocs)
    up = g.at_unit(me - 1) + (rows + 1) * row_bytes if me > 0 else None
    down = g.at_unit(me + 1) if me < nprocs - 1 else None
    rt.barrier()

    sent0 = rt.stats["put_bytes"]
    local0, remote0 = rt.stats["put_local"], rt.stats["put_remote"]
    it, converged = 0, False
    t0 = time.perf_counter()
    while it < config.max_iters:
        if up is not None:
            rt.put_blocking(up, u[1])
        if down is not None:
            rt.put_blocking(down, u[rows])
        rt.barrier()
        local = sweep(u, lo, hi)
        it += 1
        if max(struct.unpack("<d", b)[0] for b in rt.allgather(struct.pack("<d", local))) < eps:
            converged = True
            break
    seconds = time.perf_counter() - t0
    counts = struct.pack("<qqq", rt.stats["put_bytes"] - sent0,
                         rt.stats["put_local"] - local0, rt.stats["put_remote"] - remote0)
    sent, local, remote = np.sum([struct.unpack("<qqq", b) for b in rt.allgather(counts)],
                                 axis=0).tolist()

    result = {"numprocs": nprocs, "units_per_node": rt.config.units_per_node, "n": n,
              "eps": eps, "iterations": it, "seconds": seconds,
              "bytes_per_iter": sent / it if it else 0,
              "expected_bytes_per_iter": halo_bytes(n, nprocs), "local_puts": local,
              "remote_puts": remote, "converged": converged}
    if me == 0:
        grid = np.empty((n, n), dtype=np.float32)
        for r in range(nprocs):
            rt.get_blocking(g.at_unit(r) + row_bytes, grid[r * rows:(r + 1) * rows], rows * row_bytes)
        ref, serial_it = solve_serial(n, eps, config.max_iters)
        result["serial_iterations"] = serial_it
        result["max_abs_err"] = float(np.max(np.abs(grid.astype(np.float64) - ref)))
    del u
    view.release()
    rt.barrier()
    rt.team_memfree(world, g)
    return result
