import math

import numpy as np
import pytest

from zayasim.bench import KERNELS, bench_memory


def test_triad_accounting_and_sanity():
    rows = bench_memory([1 << 20], repeats=3)
    assert [r.kernel for r in rows] == list(KERNELS)
    for r in rows:
        per = 3 if r.kernel in ("add", "triad") else 2
        assert r.bytes_moved == per * r.n * 8
        assert r.verified and r.gbps > 0 and math.isfinite(r.gbps)
    triad = rows[-1]
    assert triad.bytes_moved == 24 * triad.n


def test_threads_and_float32():
    rows = bench_memory([2 << 20], kernels=["copy"], repeats=3, threads=3, dtype=np.float32)
    assert rows[0].verified and rows[0].elem_bytes == 4


@pytest.mark.parametrize("kw", [dict(buffer_bytes=[1000]), dict(buffer_bytes=[1 << 20], repeats=2),
                                dict(buffer_bytes=[1 << 20], kernels=["fma"])])
def test_bench_validation(kw):
    with pytest.raises(ValueError):
        bench_memory(**kw)
