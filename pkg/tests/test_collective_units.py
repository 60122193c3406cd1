from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from churncomm.collective import (
    BufferPool,
    ReduceOp,
    compute_chunk_boundaries,
    dequantize_into,
    finalize_reduction,
    quantize_chunk,
)


def test_boundaries_ten_over_three():
    assert compute_chunk_boundaries(10, 3) == [(0, 4), (4, 7), (7, 10)]


def test_boundaries_large_tensor_shape():
    # 268,435,456 elements over 18 ranks: 16 ceiling chunks, 2 floor chunks
    bounds = compute_chunk_boundaries(268_435_456, 18)
    sizes = [hi - lo for lo, hi in bounds]
    assert sizes.count(14_913_081) == 16
    assert sizes.count(14_913_080) == 2
    assert sum(sizes) == 268_435_456
    assert bounds[0][0] == 0 and bounds[-1][1] == 268_435_456


def test_boundaries_degenerate_small_n():
    bounds = compute_chunk_boundaries(5, 8)
    sizes = [hi - lo for lo, hi in bounds]
    assert sizes == [1, 1, 1, 1, 1, 0, 0, 0]


@given(n=st.integers(0, 10_000), w=st.integers(1, 64))
@settings(max_examples=300, deadline=None)
def test_boundaries_partition_property(n, w):
    bounds = compute_chunk_boundaries(n, w)
    assert len(bounds) == w
    assert bounds[0][0] == 0
    assert bounds[-1][1] == n
    for (a, b), (c, d) in zip(bounds, bounds[1:]):
        assert b == c and b >= a and d >= c
    sizes = [hi - lo for lo, hi in bounds]
    assert max(sizes) - min(sizes) <= 1
    assert sorted(sizes, reverse=True) == sizes


def test_quantize_constant_chunk():
    values = np.array([5.0, 5.0, 5.0], dtype=np.float32)
    out = np.empty(3, dtype=np.uint8)
    mn, scale = quantize_chunk(values, out)
    assert (mn, scale) == (5.0, 1.0)
    assert list(out) == [0, 0, 0]
    back = np.empty(3, dtype=np.float32)
    dequantize_into(out, mn, scale, back)
    assert list(back) == [5.0, 5.0, 5.0]


def test_quantize_byte_range_identity():
    values = np.arange(256, dtype=np.float32)
    out = np.empty(256, dtype=np.uint8)
    mn, scale = quantize_chunk(values, out)
    assert mn == 0.0 and scale == 1.0
    back = np.empty(256, dtype=np.float32)
    dequantize_into(out, mn, scale, back)
    assert np.array_equal(back, values)


def test_quantize_round_trip_error_bound():
    rng = np.random.default_rng(23)
    for _ in range(10_000):
        n = int(rng.integers(1, 64))
        values = rng.normal(0, rng.uniform(0.01, 100), n).astype(np.float32)
        codes = np.empty(n, dtype=np.uint8)
        mn, scale = quantize_chunk(values, codes)
        back = np.empty(n, dtype=np.float32)
        dequantize_into(codes, mn, scale, back)
        tol = scale / 2 + np.spacing(np.float32(scale * 256), dtype=np.float32)
        assert np.max(np.abs(values - back)) <= tol


def test_quantize_rejects_non_finite():
    values = np.array([1.0, np.nan], dtype=np.float32)
    with pytest.raises(ValueError):
        quantize_chunk(values, np.empty(2, dtype=np.uint8))
    values = np.array([1.0, np.inf], dtype=np.float32)
    with pytest.raises(ValueError):
        quantize_chunk(values, np.empty(2, dtype=np.uint8))


def test_finalize_sum_is_noop():
    buf = np.array([8.0, -2.0], dtype=np.float32)
    finalize_reduction(buf, ReduceOp.SUM, 4)
    assert list(buf) == [8.0, -2.0]


def test_finalize_avg_divides():
    buf = np.array([8.0], dtype=np.float32)
    finalize_reduction(buf, ReduceOp.AVG, 4)
    assert buf[0] == 2.0


def test_pool_reuse_and_counters():
    pool = BufferPool()
    a = pool.acquire(1024)
    pool.release(a)
    b = pool.acquire(1024)
    assert b is a
    assert pool.stats.allocated == 1
    assert pool.stats.hits == 1
    c = pool.acquire(1024)
    assert c is not a
    assert pool.stats.allocated == 2
