from __future__ import annotations

import csv
import io
import sys
import time
from dataclasses import dataclass

import numpy as np

KINDS = ("latency", "distance", "random_access", "stencil")
MAX_SIZE_EXP = 21


def default_sizes() -> list[int]:
    return [1 << k for k in range(MAX_SIZE_EXP + 1)]


@dataclass
class BenchConfig:
    kind: str
    sizes: list[int] | None = None
    reps: int = 10000
    reps_large: int = 100
    large_threshold: int = 64 * 1024
    warmup: int = 100
    n: int = 64
    table_bits: int = 20
    updates: int | None = None
    eps: float = 1e-4
    max_iters: int = 10 ** 6
    seed: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown benchmark kind {self.kind!r}")
        if self.sizes is None:
            self.sizes = {"latency": default_sizes(), "distance": [8, 1 << 20]}.get(self.kind, [])
        if self.reps < 1 or self.reps_large < 1:
            raise ValueError("reps must be >= 1")
        if self.kind == "latency":
            for s in self.sizes:
                if s < 1 or s & (s - 1) or s > 1 << MAX_SIZE_EXP:
                    raise ValueError(f"latency sizes must be powers of two in "
                                     f"[1, 2^{MAX_SIZE_EXP}], got {s}")

    def reps_for(self, size: int) -> int:
        return self.reps if size <= self.large_threshold else min(self.reps, self.reps_large)


def time_calls(fn, reps: int, warmup: int = 0) -> np.ndarray:
    """Wall time of each of ``reps`` calls of ``fn`` in ns, after ``warmup`` untimed calls."""
    for _ in range(warmup):
        fn()
    clock = time.perf_counter_ns
    samples = np.empty(reps, dtype=np.int64)
    for i in range(reps):
        t0 = clock()
        fn()
        samples[i] = clock() - t0
    return samples


def time_interleaved(cases, warmup: int = 0, chunk: int = 100, snapshot=None):
    """Time several ``(key, fn, reps)`` cases in round-robin chunks of ``chunk`` calls.

    Every case is sampled across the whole measurement period, so slow drift
    of the machine's speed shifts all cases alike instead of whichever case
    happened to run during a slow phase.  With ``snapshot`` (a callable
    returning a tuple of counters) the per-case counter deltas, warmup
    included, are returned as well.
    """
    samples = {key: np.empty(reps, dtype=np.int64) for key, _, reps in cases}
    done = {key: 0 for key, _, _ in cases}
    deltas = {key: None for key, _, _ in cases}
    clock = time.perf_counter_ns

    def account(key, before):
        if snapshot is not None:
            d = tuple(b - a for a, b in zip(before, snapshot()))
            old = deltas[key]
            deltas[key] = d if old is None else tuple(x + y for x, y in zip(old, d))

    for key, fn, reps in cases:
        before = snapshot() if snapshot else None
        for _ in range(min(warmup, reps)):
            fn()
        account(key, before)
    pending = list(cases)
    while pending:
        for key, fn, reps in pending:
            out, i = samples[key], done[key]
            end = min(reps, i + chunk)
            before = snapshot() if snapshot else None
            while i < end:
                t0 = clock()
                fn()
                out[i] = clock() - t0
                i += 1
            done[key] = end
            account(key, before)
        pending = [c for c in pending if done[c[0]] < c[2]]
    return (samples, deltas) if snapshot else samples


def summarize(samples) -> dict:
    s = np.asarray(samples, dtype=np.float64)
    return {"median_ns": float(np.median(s)), "mean_ns": float(s.mean()),
            "p99_ns": float(np.percentile(s, 99))}


def write_csv(rows: list[dict], header: list[str], path: str | None = None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    text = buf.getvalue()
    if path is None or path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(path, "w") as f:
            f.write(text)
    return text


def read_csv(path: str) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(f))
