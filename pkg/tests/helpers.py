"""Shared helpers for the multi-unit tests."""

import os
import subprocess
import sys

from hpgas.launcher import run_threads

SPMD = os.path.join(os.path.dirname(__file__), "spmd")


def cluster(nprocs, units_per_node, fn, *args, pool_bytes=1 << 16, timeout=120):
    return run_threads(nprocs, units_per_node, fn, pool_bytes=pool_bytes, timeout=timeout,
                       args=args)


def hpgas_run(nprocs, units_per_node, *program, pool_bytes=1 << 16, timeout=300, env=None):
    cmd = [sys.executable, "-m", "hpgas", "-n", str(nprocs), "--units-per-node",
           str(units_per_node), "--pool-bytes", str(pool_bytes), "--"] + list(program)
    return subprocess.run(cmd, capture_output=True, text=True, timeout=timeout,
                          env=env)


def spmd(name):
    return [sys.executable, os.path.join(SPMD, name)]
