"""STREAM-style memory bandwidth microbenchmark (copy, scale, add, triad)."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

KERNELS = ("copy", "scale", "add", "triad")
# arrays touched per element: reads + writes
_TRAFFIC = {"copy": 2, "scale": 2, "add": 3, "triad": 3}
MIN_BYTES = 1 << 20
SCALAR = 3.0


@dataclass
class BenchRow:
    kernel: str
    n: int
    elem_bytes: int
    bytes_moved: int
    best_s: float
    gbps: float
    verified: bool


def _run_kernel(kernel: str, a, b, c, lo: int, hi: int):
    if kernel == "copy":
        np.copyto(c[lo:hi], a[lo:hi])
    elif kernel == "scale":
        np.multiply(c[lo:hi], SCALAR, out=b[lo:hi])
    elif kernel == "add":
        np.add(a[lo:hi], b[lo:hi], out=c[lo:hi])
    elif kernel == "triad":
        np.multiply(c[lo:hi], SCALAR, out=a[lo:hi])
        np.add(b[lo:hi], a[lo:hi], out=a[lo:hi])
    else:
        raise ValueError(f"unknown kernel {kernel!r}")


def _expected(kernel: str, a0, b0, c0):
    if kernel == "copy":
        return "c", a0
    if kernel == "scale":
        return "b", SCALAR * c0
    if kernel == "add":
        return "c", a0 + b0
    return "a", b0 + SCALAR * c0


def bench_memory(buffer_bytes: Sequence[int], kernels: Sequence[str] = KERNELS, repeats: int = 5,
                 threads: int = 1, dtype=np.float64) -> List[BenchRow]:
    """Best-of-``repeats`` bandwidth per kernel and buffer size.

    One warm-up pass is discarded. Workers split the index range and meet at a
    barrier before each timed pass. After timing, the output buffer is
    checked against a direct evaluation of the kernel.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    elem = np.dtype(dtype).itemsize
    rows = []
    for size in buffer_bytes:
        if size < MIN_BYTES:
            raise ValueError(f"buffer of {size} bytes is below the 1 MiB minimum")
        n = size // elem
        for kernel in kernels:
            if kernel not in KERNELS:
                raise ValueError(f"unknown kernel {kernel!r}")
            rng = np.random.default_rng(n)
            a0, b0, c0 = (rng.standard_normal(n).astype(dtype) for _ in range(3))
            a, b, c = a0.copy(), b0.copy(), c0.copy()
            bounds = np.linspace(0, n, threads + 1).astype(int)
            times = []
            for rep in range(repeats + 1):
                np.copyto(a, a0), np.copyto(b, b0), np.copyto(c, c0)
                barrier = threading.Barrier(threads + 1)
                workers = [threading.Thread(target=_worker, args=(barrier, kernel, a, b, c, bounds[i], bounds[i + 1]))
                           for i in range(threads)]
                for w in workers:
                    w.start()
                barrier.wait()
                t0 = time.perf_counter()
                barrier.wait()
                dt = time.perf_counter() - t0
                for w in workers:
                    w.join()
                if rep:
                    times.append(dt)
            name, want = _expected(kernel, a0, b0, c0)
            got = {"a": a, "b": b, "c": c}[name]
            ok = bool(np.array_equal(got, want))
            moved = _TRAFFIC[kernel] * n * elem
            best = min(times)
            rows.append(BenchRow(kernel, n, elem, moved, best, moved / best / 1e9, ok))
    return rows


def _worker(barrier, kernel, a, b, c, lo, hi):
    barrier.wait()
    _run_kernel(kernel, a, b, c, lo, hi)
    barrier.wait()
