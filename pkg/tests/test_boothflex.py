import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ternsim.boothflex import (
    BOOTH_TABLE, INT8_INT8, TERNARY_INT8, PrecisionMode, booth_dot, booth_encode, booth_multiply,
    booth_windows, booth_windows_int8, boothflex_matmul, bs_cycles, bs_multiply, bs_slice,
    iterative_accumulate, pad_ternary,
)
from ternsim.exceptions import InvalidCode, ModeMismatch, RangeError, ShapeMismatch
from ternsim.tint import QTensor, matmul, sel
from ternsim.trit_codec import TritTensor

int8 = st.integers(-128, 127)


def _recompose(windows):
    acc = 0
    for w in windows:
        acc = acc * 4 + booth_encode(w)
    return acc


@pytest.mark.parametrize("window, factor", list(BOOTH_TABLE.items()))
def test_booth_table(window, factor):
    assert booth_encode(window) == factor


def test_booth_table_examples():
    assert booth_encode((0, 1, 1)) == 2
    assert booth_encode((1, 0, 0)) == -2
    assert booth_encode((0, 0, 0)) == 0
    with pytest.raises(ValueError):
        booth_encode((2, 0, 0))


@pytest.mark.parametrize("code, window, factor", [(0b01, (0, 1, 0), 1), (0b11, (1, 1, 0), -1), (0b00, (0, 0, 0), 0)])
def test_pad_ternary(code, window, factor):
    assert tuple(pad_ternary(code)) == window
    assert booth_encode(pad_ternary(code)) == factor


def test_pad_ternary_invalid():
    with pytest.raises(InvalidCode):
        pad_ternary(0b10)


def test_int8_windows():
    assert booth_windows_int8(0) == [(0, 0, 0)] * 5
    for x in (-1, 3, -128, 127, 77):
        ws = booth_windows_int8(x)
        assert len(ws) == 5
        assert _recompose(ws) == x


def test_iterative_accumulate():
    assert iterative_accumulate([[0] * 8] * 5) == 0
    assert iterative_accumulate([[5, 0, 0, 0, 0, 0, 0, 0]]) == 5
    with pytest.raises(ShapeMismatch):
        iterative_accumulate([[1] * 9])


def test_booth_dot(rng):
    xs = rng.integers(-128, 128, size=8).tolist()
    ys = rng.integers(-128, 128, size=8).tolist()
    assert booth_dot(xs, ys) == sum(x * y for x, y in zip(xs, ys))
    ts = rng.integers(-1, 2, size=8).tolist()
    assert booth_dot(ts, ys, TERNARY_INT8) == sum(x * y for x, y in zip(ts, ys))
    with pytest.raises(ShapeMismatch):
        booth_dot([1] * 9, [1] * 9)
    with pytest.raises(ModeMismatch):
        booth_dot([1], [1], PrecisionMode.bit_serial(8))


def test_booth_multiply_examples():
    assert booth_multiply(7, -3) == -21
    assert all(booth_multiply(0, y) == 0 for y in range(-128, 128))
    assert all(booth_multiply(-1, a, TERNARY_INT8) == sel(-1, a) for a in range(-128, 128))
    with pytest.raises(RangeError):
        booth_multiply(2, 5, TERNARY_INT8)
    with pytest.raises(RangeError):
        booth_multiply(200, 5)


def test_mode_iterations():
    assert TERNARY_INT8.iterations == 1
    assert INT8_INT8.iterations == 5
    assert PrecisionMode.bit_serial(12).iterations == 3
    with pytest.raises(ValueError):
        PrecisionMode.bit_serial(6)
    with pytest.raises(ValueError):
        PrecisionMode("ternary_int8", 4)


@pytest.mark.parametrize("y, width, nibbles", [(-1, 8, (-1, 15)), (123, 8, (7, 11)), (5, 4, (5,))])
def test_bs_slice(y, width, nibbles):
    s = bs_slice(y, width)
    assert s.nibbles == nibbles
    assert s.recompose() == y


def test_bs_multiply_examples():
    assert bs_multiply(-5, 123) == -615
    assert bs_cycles(8) == 2
    assert bs_multiply(-2, 30000, 8, 16) == -60000
    assert bs_cycles(16) == 4
    assert all(bs_multiply(x, 0, 16, w) == 0 for x in (-7, 0, 9999) for w in (4, 8, 12, 16))
    with pytest.raises(RangeError):
        bs_slice(1, 6)
    with pytest.raises(RangeError):
        bs_multiply(1, 300, 8, 8)


@settings(max_examples=300)
@given(st.integers(-(2**15), 2**15 - 1), st.integers(-(2**15), 2**15 - 1), st.sampled_from([4, 8, 12, 16]))
def test_bs_multiply_property(x, y, width):
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    y = min(max(y, lo), hi)
    assert bs_multiply(x, y, 16, width) == x * y


@given(int8, int8)
def test_booth_multiply_property(x, y):
    assert booth_multiply(x, y) == x * y


def test_windows_wide():
    for x in (-(2**15), 2**15 - 1, 12345):
        assert _recompose(booth_windows(x, 16)) == x


def test_matmul_ternary_equals_tint(rng):
    a = QTensor.random(11, 37, rng)
    w = TritTensor.random(9, 37, rng)
    out, cycles = boothflex_matmul(a, w, TERNARY_INT8)
    assert np.array_equal(out, matmul(a, w))
    assert cycles == 2 * 2 * 37


def test_matmul_int8(rng):
    a = rng.integers(-128, 128, size=(8, 8))
    w = rng.integers(-128, 128, size=(8, 8))
    out, cycles = boothflex_matmul(a, w, INT8_INT8)
    assert np.array_equal(out, a @ w.T)
    _, tern_cycles = boothflex_matmul(a, TritTensor(np.sign(w)), TERNARY_INT8)
    assert cycles == 5 * tern_cycles


def test_matmul_int8_identity(rng):
    a = rng.integers(-128, 128, size=(4, 8))
    out, _ = boothflex_matmul(a, np.eye(8, dtype=np.int64), INT8_INT8)
    assert np.array_equal(out, a)


@pytest.mark.parametrize("width", [4, 8, 12, 16])
def test_matmul_bit_serial(rng, width):
    lo, hi = -(1 << (width - 1)), (1 << (width - 1))
    a = rng.integers(lo, hi, size=(5, 16))
    w = rng.integers(-128, 128, size=(6, 16))
    out, cycles = boothflex_matmul(a, w, PrecisionMode.bit_serial(width))
    assert np.array_equal(out, a @ w.T)
    assert cycles == 1 * 1 * 16 * (width // 4)


def test_matmul_mode_errors(rng):
    with pytest.raises(ModeMismatch):
        boothflex_matmul(np.ones((1, 4)), np.ones((1, 4)), TERNARY_INT8)
    with pytest.raises(RangeError):
        boothflex_matmul(np.full((1, 4), 200), np.ones((1, 4)), INT8_INT8)
    with pytest.raises(ShapeMismatch):
        boothflex_matmul(np.ones((1, 4)), np.ones((1, 5)), INT8_INT8)
