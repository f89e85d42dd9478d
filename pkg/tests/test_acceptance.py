"""Acceptance criteria, one test (or parametrized group) per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary ends
with one PASS/FAIL line per criterion.
"""

import hashlib
import logging
import math
import os
import random
import secrets
import statistics
import sys
import time

import numpy as np
import pytest

from hpgas import launcher
from hpgas.bench import stencil
from hpgas.bench.common import read_csv
from hpgas.errors import UnknownSegmentError
from hpgas.global_memory import GlobalMemory, GlobalPointer, TableEntry, target_disp
from hpgas.rma import LOCAL, REMOTE
from hpgas.segment import SHM_DIR, list_run_objects
from hpgas.topology import Team
from helpers import cluster, spmd

pytestmark = pytest.mark.acceptance

LANE = 1 << 20
_RUN_IDS: list[str] = []


def bench(tmp_path, nprocs, upn, *args, pool_bytes=1 << 16, timeout=600):
    """Launch ``hpgas-bench`` under the launcher; return (rows, seconds, swept objects)."""
    run_id = secrets.token_hex(8)
    _RUN_IDS.append(run_id)
    out = str(tmp_path / f"{run_id}.csv")
    swept = []
    handler = _Capture(swept)
    logging.getLogger("hpgas.launcher").addHandler(handler)
    t0 = time.monotonic()
    try:
        rc = launcher.launch(nprocs, upn, [sys.executable, "-m", "hpgas.bench", *args,
                                           "--csv", out],
                             pool_bytes=pool_bytes, timeout=timeout, run_id=run_id)
    finally:
        logging.getLogger("hpgas.launcher").removeHandler(handler)
    seconds = time.monotonic() - t0
    assert rc == 0, f"benchmark exited with {rc}"
    return read_csv(out), seconds, swept


class _Capture(logging.Handler):
    def __init__(self, sink):
        super().__init__(logging.WARNING)
        self.sink = sink

    def emit(self, record):
        self.sink.append(record.getMessage())


# 1 ---------------------------------------------------------------------------

def _fuzz(rt, seed, total_ops):
    """Random puts/gets; unit w only ever writes lane w of every target.

    Each writer's shadow copy of its lanes is the oracle for its own gets;
    at the end every unit hashes all lanes it hosts and compares them with
    the writers' shadow digests.
    """
    P = rt.world_size
    rng = np.random.default_rng([seed, rt.me])
    pool = rt.local_alloc(P * LANE)
    coll = rt.team_memalloc(rt.world(), P * LANE)
    bases = [pool, coll]
    noise = rng.integers(0, 256, 2 * LANE, dtype=np.uint8).tobytes()
    shadow = np.zeros((2, P, LANE), dtype=np.uint8)
    rt.barrier()
    mismatches = ops = 0
    for _ in range(total_ops // P + (rt.me < total_ops % P)):
        size = min(max(int(math.exp(rng.uniform(0, math.log(LANE + 1)))), 1), LANE)
        off = int(rng.integers(0, LANE - size + 1))
        t, s = int(rng.integers(P)), int(rng.integers(2))
        g = bases[s].at_unit(t) + (rt.me * LANE + off)
        if rng.random() < 0.5:
            k = int(rng.integers(0, LANE))
            rt.put_blocking(g, noise[k:k + size])
            shadow[s, t, off:off + size] = np.frombuffer(noise, np.uint8, size, k)
        else:
            mismatches += rt.get_blocking(g, nbytes=size) != shadow[s, t, off:off + size].tobytes()
        ops += 1
    rt.barrier()
    digests = b"".join(hashlib.sha256(shadow[s, t].tobytes()).digest()
                       for s in range(2) for t in range(P))
    table = rt.allgather(digests)
    for s in range(2):
        for w in range(P):
            got = rt.get_blocking(bases[s].at_unit(rt.me) + w * LANE, nbytes=LANE)
            k = (s * P + rt.me) * 32
            mismatches += hashlib.sha256(got).digest() != table[w][k:k + 32]
    rt.barrier()
    rt.team_memfree(rt.world(), coll)
    return mismatches, ops


@pytest.mark.criterion("AC1 correctness fuzz, P=8, upn 1/2/8, 10,000 ops each")
@pytest.mark.parametrize("upn", [1, 2, 8])
def test_ac1_fuzz(upn):
    t0 = time.monotonic()
    res = cluster(8, upn, _fuzz, 1000 + upn, 10000, pool_bytes=8 * LANE, timeout=300)
    seconds = time.monotonic() - t0
    assert sum(r[1] for r in res) == 10000
    assert sum(r[0] for r in res) == 0
    assert seconds < 120


# 2 ---------------------------------------------------------------------------

def _aliasing(rt):
    g = rt.team_memalloc(rt.world(), 2 * 4096 * rt.world_size)
    p = rt.local_alloc(2 * 4096 * rt.world_size)
    failures = checks = 0
    rnd = random.Random(rt.me)
    peers = [u for u in range(rt.world_size) if rt.same_node(rt.me, u)]
    for base in (g, p):
        for b in peers:
            for size in (8, 4096):
                slot = base.at_unit(b) + (rt.me * 2 * 4096 + (size == 4096) * 4096)
                for write, read in ((LOCAL, REMOTE), (REMOTE, LOCAL)):
                    data = rnd.randbytes(size)
                    rt.put_blocking(slot, data, path=write)
                    failures += bytes(rt.get_blocking(slot, nbytes=size, path=read)) != data
                    checks += 1
    rt.barrier()
    # the owner sees the writers' last (local-path) bytes through its transport window too
    for w in peers:
        for size in (8, 4096):
            slot = g.at_unit(rt.me) + (w * 2 * 4096 + (size == 4096) * 4096)
            via_local = bytes(rt.get_blocking(slot, nbytes=size, path=LOCAL))
            via_remote = bytes(rt.get_blocking(slot, nbytes=size, path=REMOTE))
            failures += via_local != via_remote
            checks += 1
    rt.barrier()
    rt.team_memfree(rt.world(), g)
    return failures, checks


@pytest.mark.criterion("AC2 window aliasing, local vs forced remote path")
@pytest.mark.parametrize("nprocs,upn", [(4, 2), (4, 4)])
def test_ac2_window_aliasing(nprocs, upn):
    res = cluster(nprocs, upn, _aliasing, pool_bytes=1 << 16)
    assert sum(r[1] for r in res) == nprocs * (2 * upn * 2 * 2 + upn * 2)
    assert sum(r[0] for r in res) == 0


# 3 ---------------------------------------------------------------------------

@pytest.mark.criterion("AC3 dereference rule, 1000 random triples")
def test_ac3_dereference_rule():
    rnd = random.Random(3)
    for _ in range(1000):
        size = rnd.randint(1, 64)
        disp_set = tuple(8 * rnd.randrange(2 ** 40) for _ in range(size))
        offset = rnd.randrange(2 ** 32)
        i = rnd.randrange(size)
        expected = offset + disp_set[i]
        assert target_disp(offset, disp_set, i) == expected
        # the same answer through a translation-table lookup
        members = tuple(rnd.sample(range(1000), size))
        mem = GlobalMemory(members[0], 1)
        team = Team(5, members, 1, members[0])
        mem.add_team(team)
        mem.table.insert(TableEntry(9, 5, None, disp_set, offset + 1))
        assert mem.dereference_remote(GlobalPointer(members[i], 9, offset)) == (5, i, expected)


# 4 ---------------------------------------------------------------------------

def _table_interleaving(rt, seed):
    rnd = random.Random(seed)
    w = rt.world()
    sub = rt.team_create(w, [0, 1])
    shadow: dict[int, tuple[int, int]] = {}
    live: dict[int, tuple] = {}
    violations = 0
    for _ in range(100):
        if live and rnd.random() < 0.5:
            segid = rnd.choice(sorted(live))
            g, team = live.pop(segid)
            if team is w or sub is not None:
                rt.team_memfree(team, g)
            shadow.pop(segid, None)
        else:
            n = 8 * rnd.randint(1, 32)
            team = sub if rnd.random() < 0.3 else w
            if team is sub:
                # every unit draws the same random numbers; non-members skip the call
                g = rt.team_memalloc(sub, n) if sub is not None else None
                segid = int.from_bytes(rt.allgather((g.segid if g else 0).to_bytes(4, "little"))[0], "little")
            else:
                g = rt.team_memalloc(w, n)
                segid = g.segid
            live[segid] = (g, team if team is w else sub)
            if team is w or sub is not None:
                shadow[segid] = (n, team.teamlist_index)
        keys = [e.segid for e in rt.memory.table]
        violations += any(a >= b for a, b in zip(keys, keys[1:]))
        violations += keys != sorted(shadow)
        for segid, (n, idx) in shadow.items():
            e = rt.memory.table.get(segid)
            violations += (e.nbytes_per_unit, e.team_index) != (n, idx)
        for segid in set(range(1, max(live, default=0) + 1)) - set(shadow):
            try:
                rt.memory.table.get(segid)
                violations += 1
            except UnknownSegmentError:
                pass
    for segid, (g, team) in sorted(live.items()):
        if team is w or sub is not None:
            rt.team_memfree(team, g)
    return violations


@pytest.mark.criterion("AC4 translation table ordering, 100 alloc/free interleavings")
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_ac4_table_ordering(seed):
    assert cluster(3, 2, _table_interleaving, seed) == [0, 0, 0]


# 5, 6 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def latency_rows(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("latency")
    sizes = ",".join(str(1 << k) for k in range(11))
    rows, seconds, swept = bench(tmp, 2, 2, "latency", "--sizes", sizes, "--reps", "10000")
    return rows, seconds, swept


def _median(rows, op, size, path):
    (r,) = [r for r in rows if r["op"] == op and int(r["size"]) == size and r["path"] == path]
    assert int(r["reps"]) == 10000
    return float(r["median_ns"])


@pytest.mark.criterion("AC5 intra-node advantage, shm vs loopback transport >= 3x")
def test_ac5_intra_node_advantage(latency_rows, tmp_path):
    rows, _, _ = latency_rows
    shm, tcp = _median(rows, "put", 8, "shm"), _median(rows, "put", 8, "transport")
    print(f"8 B put median: shm {shm:.0f} ns, transport {tcp:.0f} ns, ratio {tcp / shm:.1f}")
    assert tcp / shm >= 3
    # the criterion's own budget: one 8 B run at 10,000 reps
    _, seconds, _ = bench(tmp_path, 2, 2, "latency", "--sizes", "8", "--reps", "10000")
    assert seconds < 60


@pytest.mark.criterion("AC6 small-message plateau, 1 B to 1 KiB within 2x")
def test_ac6_plateau(latency_rows):
    rows, _, _ = latency_rows
    for op in ("put", "get"):
        meds = [_median(rows, op, 1 << k, "shm") for k in range(11)]
        print(op, [round(m) for m in meds])
        assert max(meds) / min(meds) <= 2


# 7 ---------------------------------------------------------------------------

@pytest.mark.criterion("AC7 distance cliff at the first cross-node target")
def test_ac7_distance_cliff(tmp_path):
    rows, _, _ = bench(tmp_path, 8, 4, "distance", pool_bytes=4096)
    puts = [r for r in rows if r["op"] == "put" and int(r["size"]) == 8]
    assert sorted(int(r["target"]) for r in puts) == list(range(1, 8))
    same = [r for r in puts if int(r["node"]) == 0]
    first_cross = min((r for r in puts if int(r["node"]) != 0), key=lambda r: int(r["target"]))
    assert [int(r["target"]) for r in same] == [1, 2, 3]
    for r in rows:
        n = int(r["reps"]) + min(100, int(r["reps"]))
        if int(r["node"]) == 0:
            assert (int(r["local_ops"]), int(r["remote_ops"])) == (n, 0)
        else:
            assert (int(r["local_ops"]), int(r["remote_ops"])) == (0, n)
    base = statistics.median(float(r["median_ns"]) for r in same)
    print(f"same-node median {base:.0f} ns, target {first_cross['target']} "
          f"{float(first_cross['median_ns']):.0f} ns")
    assert float(first_cross["median_ns"]) >= 2 * base


# 8 ---------------------------------------------------------------------------

RA_UPDATES = "8192"


@pytest.fixture(scope="module")
def ra_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ra")
    out = {}
    for p, upn in ((1, 1), (4, 4), (4, 1), (8, 8), (8, 1)):
        rows, _, _ = bench(tmp, p, upn, "ra", "--table-bits", "20", "--updates", RA_UPDATES,
                           "--seed", "7", pool_bytes=4096)
        out[p, upn] = rows[0]
    return out


@pytest.mark.criterion("AC8 random access: exact oracle, GUPs shared node > one unit per node")
@pytest.mark.parametrize("p", [1, 4, 8])
def test_ac8_random_access(ra_runs, p):
    shared = ra_runs[p, p]
    assert shared["verified"] == "True" and int(shared["mismatches"]) == 0
    assert int(shared["table_bits"]) == 20 and float(shared["gups"]) > 0
    if p > 1:
        spread = ra_runs[p, 1]
        assert spread["verified"] == "True" and int(spread["mismatches"]) == 0
        print(f"P={p}: GUPs {float(shared['gups']):.3g} (upn={p}) vs "
              f"{float(spread['gups']):.3g} (upn=1)")
        assert float(shared["gups"]) > float(spread["gups"])


# 9 ---------------------------------------------------------------------------

STENCIL_EPS = "1e-7"


@pytest.mark.criterion("AC9 stencil: 1536 B/iteration, serial agreement 1e-5, P=1 sends 0")
def test_ac9_stencil(tmp_path):
    (r,), _, _ = bench(tmp_path, 4, 4, "stencil", "--n", "64", "--eps", STENCIL_EPS,
                       pool_bytes=4096)
    assert r["converged"] == "True"
    assert float(r["bytes_per_iter"]) == 1536 == stencil.halo_bytes(64, 4)
    print(f"iterations {r['iterations']} (serial {r['serial_iterations']}), "
          f"max abs err {float(r['max_abs_err']):.2e}")
    assert float(r["max_abs_err"]) <= 1e-5
    (one,), _, _ = bench(tmp_path, 1, 1, "stencil", "--n", "64", "--eps", STENCIL_EPS,
                         pool_bytes=4096)
    assert float(one["bytes_per_iter"]) == 0 and float(one["max_abs_err"]) == 0


# 10 --------------------------------------------------------------------------

@pytest.mark.criterion("AC10 resource hygiene, including injected crashes")
@pytest.mark.parametrize("how", ["exit", "signal", "orphan"])
def test_ac10_crash_hygiene(how):
    run_id = secrets.token_hex(8)
    _RUN_IDS.append(run_id)
    env = dict(os.environ, CRASH_UNIT="1", CRASH_HOW=how)
    rc = launcher.launch(4, 2, spmd("crash.py"), pool_bytes=8192, env=env, timeout=120,
                         run_id=run_id)
    assert rc != 0
    assert list_run_objects(run_id) == []


@pytest.mark.criterion("AC10 resource hygiene, including injected crashes")
def test_ac10_no_leftovers_from_any_run():
    # runs in file order, after every launched acceptance run
    assert _RUN_IDS
    leftovers = [n for rid in _RUN_IDS for n in list_run_objects(rid)]
    assert leftovers == []
    assert not [n for n in os.listdir(SHM_DIR) if n.startswith("hpgas.")]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
