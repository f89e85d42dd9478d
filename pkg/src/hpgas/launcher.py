"""SPMD launcher: ``hpgas-run -n P --units-per-node U [--pool-bytes B] -- prog args``.

The launcher binds one listening socket per unit, writes the endpoint
directory, and hands each child its socket through ``HPGAS_LISTEN_FD``, so
no port can be stolen between directory creation and child start-up.  If
any child fails the rest are terminated, and shared-memory objects carrying
the run id are unlinked whatever happened.
"""

from __future__ import annotations

import argparse
import logging
import os
import secrets
import signal
import subprocess
import sys
import tempfile
import threading
import time
import traceback

from .runtime import Runtime, listen_socket
from .segment import sweep_run_objects
from .topology import (DEFAULT_POOL_BYTES, ENV_ENDPOINT_FILE, ENV_LISTEN_FD, ENV_POOL_BYTES,
                       ENV_RUN_ID, ENV_UNIT, ENV_UNITS_PER_NODE, ENV_WORLD_SIZE, RunConfig,
                       node_of)
from .transport import Endpoint, EndpointDirectory

log = logging.getLogger(__name__)

HOST = "127.0.0.1"


def new_run_id() -> str:
    return secrets.token_hex(8)


def _check_shape(nprocs: int, units_per_node: int):
    if nprocs < 1:
        raise ValueError(f"need at least one unit, got {nprocs}")
    if not 1 <= units_per_node <= nprocs:
        raise ValueError(f"units_per_node must lie in [1, {nprocs}], got {units_per_node}")


def _bind_all(nprocs, units_per_node, run_id, path):
    socks = [listen_socket(HOST, 0, backlog=max(128, 2 * nprocs)) for _ in range(nprocs)]
    entries = {u: Endpoint(u, node_of(u, units_per_node), HOST, s.getsockname()[1])
               for u, s in enumerate(socks)}
    EndpointDirectory(run_id, entries).write(path)
    return socks


def _exit_code(rc: int) -> int:
    return 128 - rc if rc < 0 else rc


def launch(nprocs: int, units_per_node: int, program: list[str],
           pool_bytes: int = DEFAULT_POOL_BYTES, env: dict | None = None,
           timeout: float | None = None, run_id: str | None = None) -> int:
    """Run ``program`` as ``nprocs`` units and return the aggregated exit status."""
    _check_shape(nprocs, units_per_node)
    if not program:
        raise ValueError("no program given")
    run_id = run_id or new_run_id()
    workdir = tempfile.mkdtemp(prefix=f"hpgas-{run_id}-")
    path = os.path.join(workdir, "endpoints")
    socks = _bind_all(nprocs, units_per_node, run_id, path)
    base = dict(os.environ if env is None else env)
    base.update({ENV_WORLD_SIZE: str(nprocs), ENV_UNITS_PER_NODE: str(units_per_node),
                 ENV_RUN_ID: run_id, ENV_ENDPOINT_FILE: path,
                 ENV_POOL_BYTES: str(pool_bytes)})
    procs: list[subprocess.Popen] = []
    status = 0
    try:
        for u, s in enumerate(socks):
            child_env = dict(base)
            child_env[ENV_UNIT] = str(u)
            child_env[ENV_LISTEN_FD] = str(s.fileno())
            procs.append(subprocess.Popen(program, env=child_env, pass_fds=(s.fileno(),)))
        for s in socks:
            s.close()
        status = _supervise(procs, timeout)
    except BaseException:
        _terminate(procs)
        raise
    finally:
        for s in socks:
            s.close()
        leaked = sweep_run_objects(run_id)
        if leaked:
            log.warning("removed %d shared-memory objects of run %s", len(leaked), run_id)
        try:
            os.unlink(path)
            os.rmdir(workdir)
        except OSError:
            pass
    return status


def _supervise(procs, timeout):
    deadline = None if timeout is None else time.monotonic() + timeout
    pending = set(range(len(procs)))
    status = 0
    while pending:
        for u in sorted(pending):
            rc = procs[u].poll()
            if rc is None:
                continue
            pending.discard(u)
            if rc != 0 and status == 0:
                status = _exit_code(rc)
                log.error("unit %d exited with %d, terminating the run", u, rc)
                _terminate(procs)
        if deadline is not None and time.monotonic() > deadline and pending:
            log.error("run exceeded %.0f s, terminating", timeout)
            _terminate(procs)
            status = status or 124
        time.sleep(0.01)
    return status


def _terminate(procs, grace: float = 2.0):
    for p in procs:
        if p.poll() is None:
            p.send_signal(signal.SIGTERM)
    end = time.monotonic() + grace
    for p in procs:
        try:
            p.wait(max(0.0, end - time.monotonic()))
        except subprocess.TimeoutExpired:
            p.kill()
            p.wait()


def run_threads(nprocs: int, units_per_node: int, fn, pool_bytes: int = 1 << 20,
                timeout: float = 120.0, args=()):
    """Run ``fn(runtime, *args)`` on ``nprocs`` units hosted as threads of this process.

    Returns the per-unit results in unit order; re-raises the first failure.
    Meant for tests and experiments, it exercises the same shared segments
    and TCP transport as a real launch.
    """
    _check_shape(nprocs, units_per_node)
    run_id = new_run_id()
    workdir = tempfile.mkdtemp(prefix=f"hpgas-{run_id}-")
    path = os.path.join(workdir, "endpoints")
    socks = _bind_all(nprocs, units_per_node, run_id, path)
    results = [None] * nprocs
    errors: list[tuple[int, BaseException, str]] = []
    runtimes = [Runtime(RunConfig(u, nprocs, units_per_node, run_id, path, pool_bytes),
                        socks[u], collective_timeout=timeout) for u in range(nprocs)]

    def body(u):
        rt = runtimes[u]
        try:
            rt.init()
            results[u] = fn(rt, *args)
            rt.finalize()
        except BaseException as exc:
            errors.append((u, exc, traceback.format_exc()))
            for other in runtimes:
                other.transport.abort(f"unit {u} failed")
            rt.transport.close()
            rt.memory.close()

    threads = [threading.Thread(target=body, args=(u,), name=f"unit-{u}", daemon=True)
               for u in range(nprocs)]
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout)
    finally:
        sweep_run_objects(run_id)
        try:
            os.unlink(path)
            os.rmdir(workdir)
        except OSError:
            pass
    hung = [t.name for t in threads if t.is_alive()]
    if errors:
        u, exc, tb = errors[0]
        raise RuntimeError(f"unit {u} failed:\n{tb}") from exc
    if hung:
        raise TimeoutError(f"units still running after {timeout} s: {hung}")
    return results


def main(argv=None):
    parser = argparse.ArgumentParser(prog="hpgas-run", description=__doc__.splitlines()[0])
    parser.add_argument("-n", "--nprocs", type=int, required=True)
    parser.add_argument("--units-per-node", type=int, default=None,
                        help="units per virtual node (default: all units on one node)")
    parser.add_argument("--pool-bytes", type=int, default=DEFAULT_POOL_BYTES)
    parser.add_argument("--timeout", type=float, default=None)
    parser.add_argument("program", nargs=argparse.REMAINDER)
    args = parser.parse_args(argv)
    program = args.program
    if program and program[0] == "--":
        program = program[1:]
    if not program:
        parser.error("missing program")
    logging.basicConfig(level=logging.WARNING, format="hpgas-run: %(message)s")
    upn = args.units_per_node or args.nprocs
    try:
        return launch(args.nprocs, upn, program, args.pool_bytes, timeout=args.timeout)
    except (ValueError, OSError) as exc:
        print(f"hpgas-run: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
