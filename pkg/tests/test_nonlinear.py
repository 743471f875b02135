import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ternsim.exceptions import LengthMismatch, ZeroSum
from ternsim.nonlinear import (
    AbsmaxQuantizer, QuantParams, SoftmaxState, absmax_quantize, fused_output, rmsnorm_two_stage,
    round_half_away, softmax_stage1, softmax_stage2, two_level_schedule, two_stage_softmax, unfused_output,
)


def _ref_softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def test_round_half_away():
    assert round_half_away([0.5, -0.5, 1.5, -2.5, 0.49]).tolist() == [1, -1, 2, -3, 0]


def test_stage1_examples():
    st_ = SoftmaxState()
    assert softmax_stage1([16], st_).tolist() == [1.0]
    assert st_.running_sum == 1.0
    st_ = SoftmaxState()
    assert np.allclose(softmax_stage1([0, 0], st_), [math.exp(-16)] * 2)
    st_ = SoftmaxState()
    softmax_stage1([20], st_)
    assert st_.overflow_count == 1


def test_stage2_examples():
    assert np.allclose(two_stage_softmax([3, 3, 3, 3]), 0.25)
    assert np.allclose(two_stage_softmax([16, 16]), 0.5)
    with pytest.raises(ZeroSum):
        softmax_stage2(SoftmaxState(), [np.zeros(2)])


def test_stage2_zero_sum_from_underflow():
    with pytest.raises(ZeroSum):
        two_stage_softmax([-2000.0, -3000.0])


def test_softmax_matches_reference(rng):
    for _ in range(200):
        x = rng.uniform(-10, 16, size=rng.integers(1, 100))
        out = two_stage_softmax(x)
        assert np.allclose(out, _ref_softmax(x), rtol=1e-6, atol=0)
        assert abs(out.sum() - 1) < 1e-9


@pytest.mark.parametrize("x, expect", [([1, 1, 1, 1], [1, 1, 1, 1]), ([2, 2], [1, 1])])
def test_rmsnorm_examples(x, expect):
    assert np.allclose(rmsnorm_two_stage(x, np.ones(len(x)), eps=0.0), expect)


def test_rmsnorm_random(rng):
    for n in (1, 7, 8, 33, 64):
        x = rng.standard_normal(n)
        w = rng.standard_normal(n)
        oracle = x * w / np.sqrt(np.mean(x * x) + 1e-5)
        assert np.allclose(rmsnorm_two_stage(x, w), oracle, rtol=1e-12)


def test_rmsnorm_errors():
    with pytest.raises(LengthMismatch):
        rmsnorm_two_stage([1, 2], [1])
    with pytest.raises(LengthMismatch):
        rmsnorm_two_stage([], [])


def test_absmax_examples():
    q = absmax_quantize([0.5, -1.0])
    assert q.scale == 127 and q.data.tolist() == [[64, -127]]
    z = absmax_quantize([0.0, 0.0])
    assert z.scale == 1 and not z.data.any()
    assert absmax_quantize([1.0]).data.tolist() == [[127]]
    with pytest.raises(LengthMismatch):
        absmax_quantize([])


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=False), min_size=1, max_size=50))
def test_absmax_error_bound(xs):
    q = absmax_quantize(xs)
    err = np.abs(q.dequantize().ravel() - np.asarray(xs))
    assert np.all(err <= 0.5 / q.scale * (1 + 1e-9))
    assert np.abs(q.data).max() <= 127


def test_fused_examples():
    q = QuantParams(127.0)
    assert fused_output(3.0, 3.0, q) == 127
    assert fused_output(0.0, 5.0, q) == 0


def test_fused_equals_unfused(rng):
    for partial, d, s in zip(rng.uniform(-2, 2, 5000), rng.uniform(0.1, 10, 5000), rng.uniform(1, 500, 5000)):
        q = QuantParams(s)
        assert fused_output(partial, d, q) == unfused_output(partial, d, q)


def test_two_level_single_vector():
    trace = two_level_schedule([[np.ones(8)] * 4])
    assert [e.cycle for e in trace.tiles] == [0, 1, 2, 3]
    assert len(trace.barriers) == 1
    assert trace.stalls() == 0


def test_two_level_counts(rng):
    n, t = 5, 3
    vectors = [[rng.standard_normal(8) for _ in range(t)] for _ in range(n)]
    trace = two_level_schedule(vectors, tile_op=lambda x: 2 * x)
    assert len(trace.tiles) == n * t and len(trace.barriers) == n
    assert trace.stalls() == 0
    # The barrier precedes the next vector's first tile.
    for v in range(1, n):
        bar = next(e for e in trace.barriers if e.vector == v - 1)
        first = next(e for e in trace.tiles if e.vector == v)
        assert first.cycle > bar.cycle
    expect = absmax_quantize(2 * np.concatenate(vectors[2]))
    assert np.array_equal(trace.outputs[2].data, expect.data)


def test_quantizer_estimator(rng):
    X = rng.standard_normal((20, 4))
    qz = AbsmaxQuantizer().fit(X)
    Xq = qz.transform(X)
    assert np.abs(Xq).max() == 127
    assert np.allclose(qz.inverse_transform(Xq), X, atol=0.5 / qz.scale_.min() + 1e-12)
    pf = AbsmaxQuantizer(per="feature").fit(X)
    assert (np.abs(pf.transform(X)).max(axis=0) == 127).all()
    with pytest.raises(ValueError):
        AbsmaxQuantizer(per="row").fit(X)
    with pytest.raises(LengthMismatch):
        qz.transform(np.zeros((1, 3)))


@settings(max_examples=100)
@given(st.lists(st.floats(-30, 16, allow_nan=False), min_size=1, max_size=64))
def test_softmax_sums_to_one(xs):
    out = two_stage_softmax(xs)
    assert abs(out.sum() - 1) < 1e-9
