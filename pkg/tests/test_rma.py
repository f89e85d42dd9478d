import os
import random
from functools import reduce

import numpy as np
import pytest

from hpgas import ADD, XOR
from hpgas.errors import AlignmentError, OutOfRangeError, UnknownSegmentError
from hpgas.global_memory import GlobalPointer
from hpgas.rma import LOCAL, REMOTE
from hpgas.topology import same_node
from helpers import cluster


def _dispatch(rt):
    g = rt.team_memalloc(rt.world(), 64)
    before = dict(rt.stats)
    for u in range(rt.world_size):
        rt.put_blocking(g.at_unit(u) + 8 * rt.me, b"12345678")
    local = rt.stats["put_local"] - before.get("put_local", 0)
    remote = rt.stats["put_remote"] - before.get("put_remote", 0)
    rt.barrier()
    rt.team_memfree(rt.world(), g)
    return local, remote


@pytest.mark.parametrize("upn", [1, 2, 4])
def test_local_path_iff_same_node(upn):
    for me, (local, remote) in enumerate(cluster(4, upn, _dispatch)):
        expected = sum(same_node(me, u, upn) for u in range(4))
        assert (local, remote) == (expected, 4 - expected)


def _roundtrips(rt):
    w = rt.world()
    g = rt.team_memalloc(w, 1 << 20)
    peer = rt.me ^ 1
    far = (rt.me + 2) % 4
    rt.put_blocking(g.at_unit(peer), bytes([rt.me]) * 8)
    rt.barrier()
    near = bytes(rt.get_blocking(g.at_unit(rt.me), nbytes=8))
    rt.barrier()
    blob = os.urandom(1 << 20)
    if rt.me < 2:
        rt.put_blocking(g.at_unit(far), blob)
        echo = bytes(rt.get_blocking(g.at_unit(far), nbytes=1 << 20))
        assert echo == blob
    rt.barrier()
    # out of range leaves the target untouched
    target = g.at_unit(far) + ((1 << 20) - 4)
    before = bytes(rt.get_blocking(target, nbytes=4))
    with pytest.raises(OutOfRangeError):
        rt.put_blocking(target, b"too long")
    with pytest.raises(OutOfRangeError):
        rt.put_blocking(g.at_unit(peer) + ((1 << 20) - 4), b"too long")
    assert bytes(rt.get_blocking(target, nbytes=4)) == before
    assert rt.get_blocking(g.at_unit(far), bytearray(), nbytes=0) == bytearray()
    assert rt.get_blocking(g.at_unit(peer), nbytes=0) == bytearray()
    with pytest.raises(ValueError):
        rt.put_blocking(g.at_unit(far), b"abc", nbytes=4)
    with pytest.raises(ValueError):
        rt.get_blocking(g.at_unit(far), bytes(4))
    with pytest.raises(ValueError):
        rt.get_blocking(g.at_unit(far), nbytes=8, path=LOCAL)
    with pytest.raises(UnknownSegmentError):
        rt.get_blocking(GlobalPointer(far, 4242, 0), nbytes=8)
    rt.barrier()
    rt.team_memfree(w, g)
    return near


def test_roundtrips_and_errors():
    assert cluster(4, 2, _roundtrips) == [bytes([u ^ 1]) * 8 for u in range(4)]


def _fan_in(rt):
    g = rt.team_memalloc(rt.world(), 4096)
    if rt.me == 0:
        rt.put_blocking(g, bytes(range(256)) * 16)
    rt.barrier()
    out = [bytes(rt.get_blocking(g, nbytes=4096)) for _ in range(20)]
    rt.barrier()
    rt.team_memfree(rt.world(), g)
    return set(out)


def test_concurrent_gets_fan_in():
    for s in cluster(6, 2, _fan_in):
        assert s == {bytes(range(256)) * 16}


def _atomics(rt, seed):
    w = rt.world()
    g = rt.team_memalloc(w, 64)
    rnd = random.Random(seed + rt.me)
    for _ in range(25):
        rt.atomic_op64(g + 8, ADD, 1)
    ops = [rnd.getrandbits(64) for _ in range(40)]
    for k, v in enumerate(ops):
        # alternate forced paths where both exist
        path = REMOTE if k % 2 else None
        rt.atomic_op64(g.at_unit(rt.world_size - 1) + 16, XOR, v, path=path)
    x = rnd.getrandbits(64)
    mine = g.at_unit(rt.me) + 24
    rt.atomic_op64(mine, XOR, x)
    rt.atomic_op64(mine, XOR, x)
    assert rt.atomic_op64(mine, ADD, 0) == 0
    assert rt.atomic_op64(mine, ADD, -1) == 0
    assert rt.atomic_op64(mine, ADD, 0) == 2 ** 64 - 1
    with pytest.raises(AlignmentError):
        rt.atomic_op64(g + 4, ADD, 1)
    with pytest.raises(OutOfRangeError):
        rt.atomic_op64(g.at_unit(rt.world_size - 1) + 64, ADD, 1)
    with pytest.raises(ValueError):
        rt.atomic_op64(g, "mul", 1)
    rt.barrier()
    count = rt.atomic_op64(g + 8, ADD, 0)
    xor = rt.atomic_op64(g.at_unit(rt.world_size - 1) + 16, XOR, 0)
    rt.barrier()
    rt.team_memfree(w, g)
    return count, xor


@pytest.mark.parametrize("upn", [1, 2, 4])
def test_atomic_oracles(upn):
    res = cluster(4, upn, _atomics, 11)
    oracle = 0
    for u in range(4):
        rnd = random.Random(11 + u)
        oracle ^= reduce(lambda a, b: a ^ b, [rnd.getrandbits(64) for _ in range(40)])
    assert res == [(100, oracle)] * 4


def _path_equivalence(rt, seed):
    g = rt.team_memalloc(rt.world(), 8192)
    rnd = random.Random(seed)
    results = []
    for k in range(60):
        size = rnd.randint(1, 4096)
        off = rnd.randint(0, 8192 - size)
        owner = rnd.randrange(rt.world_size)
        writer = rnd.randrange(rt.world_size)
        data = rnd.randbytes(size)
        if rt.me == writer:
            target = g.at_unit(owner) + off
            first = LOCAL if rt.memory.is_local(owner) and k % 2 else REMOTE
            rt.put_blocking(target, data, path=first)
            other = REMOTE if first == LOCAL else (LOCAL if rt.memory.is_local(owner) else REMOTE)
            results.append(bytes(rt.get_blocking(target, nbytes=size, path=other)) == data)
        rt.barrier()
    rt.team_memfree(rt.world(), g)
    return results


def test_path_equivalence():
    res = cluster(4, 2, _path_equivalence, 5)
    flat = [ok for r in res for ok in r]
    assert len(flat) == 60 and all(flat)


def _numpy_buffers(rt):
    g = rt.local_alloc(64)
    a = np.arange(8, dtype=np.float64)
    rt.put_blocking(g, a)
    out = np.zeros(8)
    rt.get_blocking(g, out, path=REMOTE)
    return bool(np.array_equal(a, out)), rt.stats["put_local"], rt.stats["get_remote"]


def test_numpy_buffers_and_self_loopback():
    assert cluster(1, 1, _numpy_buffers) == [(True, 1, 1)]
