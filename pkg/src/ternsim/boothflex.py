"""Radix-4 Booth mixed-precision core and its bit-serial extension.

The multiplier operand X is recoded into overlapping 3-bit windows
``(x[2i+1], x[2i], x[2i-1])`` with ``x[-1] = 0``; each window selects a
factor in {0, +-1, +-2} applied to the multiplicand Y.  Windows are consumed
most-significant first and folded with a shift-left-by-2 recurrence::

    acc = acc * 4 + sum_j PP[i, j]

Ternary weights reuse the same encoder: their 2-bit storage code gets a 0
appended as LSB, which yields the windows 010 / 000 / 110 (factors +1, 0, -1)
and finishes in a single step.

The bit-serial variant slices the activation into 4-bit nibbles (the most
significant one signed), streams them MSB first with ``acc = (acc << 4) + PP``
and forms each nibble product from 4-bit Booth levels joined by shift-by-2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from ._validation import check_signed
from .exceptions import ModeMismatch, RangeError, ShapeMismatch
from .tint import ACC_MAX, ACC_MIN, DEFAULT_GEOMETRY, CoreGeometry, QTensor, tint_cycles
from .trit_codec import TritTensor, decode_2bit, encode_2bit

REDUCTION_GROUP = 8
BS_WIDTHS = (4, 8, 12, 16)
NIBBLE_BOOTH_LEVELS = 3


class BoothWindow(NamedTuple):
    hi: int
    mid: int
    lo: int

    @property
    def bits(self) -> int:
        return (self.hi << 2) | (self.mid << 1) | self.lo


# Standard radix-4 Booth recoding table, indexed by (x[2i+1], x[2i], x[2i-1]).
BOOTH_TABLE = {
    (0, 0, 0): 0,
    (0, 0, 1): 1,
    (0, 1, 0): 1,
    (0, 1, 1): 2,
    (1, 0, 0): -2,
    (1, 0, 1): -1,
    (1, 1, 0): -1,
    (1, 1, 1): 0,
}
_FACTOR_BY_BITS = np.array([BOOTH_TABLE[((b >> 2) & 1, (b >> 1) & 1, b & 1)] for b in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class PrecisionMode:
    kind: str
    width: int = 8

    def __post_init__(self):
        if self.kind not in ("ternary_int8", "int8_int8", "bit_serial"):
            raise ValueError(f"unknown precision mode {self.kind!r}")
        if self.kind == "bit_serial" and self.width not in BS_WIDTHS:
            raise ValueError(f"bit-serial width must be one of {BS_WIDTHS}")
        if self.kind != "bit_serial" and self.width != 8:
            raise ValueError(f"{self.kind} has a fixed 8-bit activation width")

    @classmethod
    def bit_serial(cls, width: int) -> "PrecisionMode":
        return cls("bit_serial", width)

    @property
    def iterations(self) -> int:
        """Model cycles per accumulation step."""
        if self.kind == "ternary_int8":
            return 1
        if self.kind == "int8_int8":
            return n_booth_windows(8)
        return self.width // 4

    def __str__(self) -> str:
        return f"bit_serial{self.width}" if self.kind == "bit_serial" else self.kind


TERNARY_INT8 = PrecisionMode("ternary_int8")
INT8_INT8 = PrecisionMode("int8_int8")


def booth_encode(window) -> int:
    key = tuple(int(b) for b in window)
    try:
        return BOOTH_TABLE[key]
    except KeyError:
        raise ValueError(f"invalid Booth window {window!r}") from None


def pad_ternary(code: int) -> BoothWindow:
    """Append a 0 LSB to a 2-bit ternary storage code."""
    decode_2bit(code)  # validates, raises InvalidCode for 0b10
    return BoothWindow((code >> 1) & 1, code & 1, 0)


def n_booth_windows(width: int) -> int:
    return math.ceil((width + 2) / 2)


def booth_windows(x: int, width: int, n_windows: int | None = None) -> list[BoothWindow]:
    """Overlapping windows of a sign-extended ``width``-bit operand, MSB window first."""
    x = check_signed(x, width)
    n = n_booth_windows(width) if n_windows is None else n_windows

    def bit(j: int) -> int:
        return 0 if j < 0 else (x >> j) & 1

    return [BoothWindow(bit(2 * i + 1), bit(2 * i), bit(2 * i - 1)) for i in reversed(range(n))]


def booth_windows_int8(x: int) -> list[BoothWindow]:
    return booth_windows(x, 8)


def iterative_accumulate(partial_products: Sequence[Sequence[int]]) -> int:
    """Fold per-step partial products, MSB step first: ``acc = acc * 4 + sum(step)``.

    Each step carries at most one partial product per PE of a reduction group.
    """
    acc = 0
    for step in partial_products:
        if len(step) > REDUCTION_GROUP:
            raise ShapeMismatch(f"a step holds at most {REDUCTION_GROUP} partial products")
        acc = (acc << 2) + sum(int(pp) for pp in step)
    return acc


def booth_dot(xs: Sequence[int], ys: Sequence[int], mode: PrecisionMode = INT8_INT8) -> int:
    """Dot product of one reduction group through the Booth datapath.

    ``xs`` are the Booth-encoded multipliers (weights), ``ys`` the
    multiplicands (activations).
    """
    if len(xs) != len(ys):
        raise ShapeMismatch("operand vectors differ in length")
    if len(xs) > REDUCTION_GROUP:
        raise ShapeMismatch(f"a reduction group holds at most {REDUCTION_GROUP} elements")
    ys = [check_signed(y, 8, "multiplicand") for y in ys]
    if mode.kind == "ternary_int8":
        factors = [[_ternary_factor(x)] for x in xs]
    elif mode.kind == "int8_int8":
        factors = [[booth_encode(w) for w in booth_windows(x, 8)] for x in xs]
    else:
        raise ModeMismatch("booth_dot covers the fixed-precision modes only")
    steps = [[f[i] * y for f, y in zip(factors, ys)] for i in range(mode.iterations)]
    return iterative_accumulate(steps)


def _ternary_factor(x: int) -> int:
    if x not in (-1, 0, 1):
        raise RangeError(f"ternary mode needs a weight in {{-1, 0, +1}}, got {x}")
    return booth_encode(pad_ternary(encode_2bit(x)))


def booth_multiply(x: int, y: int, mode: PrecisionMode = INT8_INT8) -> int:
    """Exact ``x * y`` with x as the Booth-recoded multiplier.

    Ternary mode takes x in {-1, 0, +1} and finishes in one step; INT8 mode
    walks five windows.  Bit-serial modes stream y in nibbles.
    """
    if mode.kind == "bit_serial":
        return bs_multiply(x, y, 8, mode.width)
    y = check_signed(y, 8, "multiplicand")
    if mode.kind == "ternary_int8":
        return iterative_accumulate([[_ternary_factor(int(x)) * y]])
    x = check_signed(x, 8, "multiplier")
    return iterative_accumulate([[booth_encode(w) * y] for w in booth_windows(x, 8)])


# --- bit-serial extension --------------------------------------------------

class BSNibbleStream(NamedTuple):
    nibbles: tuple[int, ...]
    width: int

    def recompose(self) -> int:
        n = len(self.nibbles)
        return sum(nib << (4 * (n - 1 - i)) for i, nib in enumerate(self.nibbles))


def _check_bs_width(width: int) -> None:
    if width not in BS_WIDTHS:
        raise RangeError(f"bit-serial width must be one of {BS_WIDTHS}, got {width}")


def bs_slice(y: int, width: int) -> BSNibbleStream:
    """Split y into width/4 nibbles, most significant (signed) first."""
    _check_bs_width(width)
    y = check_signed(y, width)
    n = width // 4
    nibbles = [y >> (4 * (n - 1))]
    nibbles += [(y >> (4 * i)) & 0xF for i in reversed(range(n - 1))]
    return BSNibbleStream(tuple(nibbles), width)


def bs_cycles(y_width: int) -> int:
    _check_bs_width(y_width)
    return y_width // 4


def _nibble_product(nibble: int, x: int, signed: bool) -> int:
    level_width = 4 if signed else 5
    acc = 0
    for window in booth_windows(nibble, level_width, NIBBLE_BOOTH_LEVELS):
        acc = (acc << 2) + booth_encode(window) * x
    return acc


def bs_multiply(x: int, y: int, x_width: int = 8, y_width: int = 8) -> int:
    """Exact ``x * y`` streaming y through the bit-serial MAC, y_width/4 cycles."""
    if x_width < 1 or x_width > 32:
        raise RangeError("multiplicand width must be in [1, 32]")
    x = check_signed(x, x_width, "multiplicand")
    stream = bs_slice(y, y_width)
    acc = 0
    for i, nibble in enumerate(stream.nibbles):
        acc = (acc << 4) + _nibble_product(nibble, x, signed=(i == 0))
    return acc


# --- matrix engine ---------------------------------------------------------

def booth_factor_planes(values: np.ndarray, width: int, n_windows: int | None = None) -> np.ndarray:
    """Booth factors of every element, shape (n_windows, *values.shape), MSB window first."""
    v = np.asarray(values, dtype=np.int64)
    n = n_booth_windows(width) if n_windows is None else n_windows

    def bit(j: int) -> np.ndarray:
        return np.zeros_like(v) if j < 0 else (v >> j) & 1

    planes = [
        _FACTOR_BY_BITS[(bit(2 * i + 1) << 2) | (bit(2 * i) << 1) | bit(2 * i - 1)]
        for i in reversed(range(n))
    ]
    return np.stack(planes)


def _ternary_factor_plane(trits: np.ndarray) -> np.ndarray:
    lut = {t: booth_encode(pad_ternary(encode_2bit(t))) for t in (-1, 0, 1)}
    table = np.array([lut[-1], lut[0], lut[1]], dtype=np.int64)
    return table[trits.astype(np.int64) + 1]


def _signed_range_ok(arr: np.ndarray, width: int) -> bool:
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    return arr.size == 0 or (arr.min() >= lo and arr.max() <= hi)


def boothflex_matmul(act, w, mode: PrecisionMode = INT8_INT8, geometry: CoreGeometry = DEFAULT_GEOMETRY):
    """``output[m, n] = sum_k act[m, k] * w[n, k]`` on the Booth array.

    Returns ``(int32 output, cycles)``.  The weight operand is the Booth
    multiplier in the fixed modes; in bit-serial modes the activation is
    nibble-sliced and each nibble is Booth-recoded instead.  The k-sum in
    each recurrence step is the spatial reduction across PEs.
    """
    a = act.data if isinstance(act, QTensor) else np.asarray(act)
    if a.ndim == 1:
        a = a[None, :]
    a = a.astype(np.int64)
    if isinstance(w, TritTensor):
        wt = w.data.astype(np.int64)
        ternary = True
    else:
        wt = (w.data if isinstance(w, QTensor) else np.asarray(w)).astype(np.int64)
        ternary = False
    if a.ndim != 2 or wt.ndim != 2:
        raise ShapeMismatch("operands must be 2-D")
    if a.shape[1] != wt.shape[1]:
        raise ShapeMismatch(f"activation has {a.shape[1]} columns, weights have {wt.shape[1]}")

    if mode.kind == "ternary_int8":
        if not ternary:
            raise ModeMismatch("ternary mode needs TritTensor weights")
        if not _signed_range_ok(a, 8):
            raise RangeError("activations must be INT8")
        acc = a @ _ternary_factor_plane(wt).T
    elif mode.kind == "int8_int8":
        if not (_signed_range_ok(a, 8) and _signed_range_ok(wt, 8)):
            raise RangeError("INT8 mode operands must lie in [-128, 127]")
        acc = np.zeros((a.shape[0], wt.shape[0]), dtype=np.int64)
        for plane in booth_factor_planes(wt, 8):
            acc = acc * 4 + a @ plane.T
    else:
        width = mode.width
        if not _signed_range_ok(a, width):
            raise RangeError(f"activations exceed {width} signed bits")
        if not _signed_range_ok(wt, 16):
            raise RangeError("bit-serial multiplicands are limited to 16 bits")
        n_nib = width // 4
        acc = np.zeros((a.shape[0], wt.shape[0]), dtype=np.int64)
        for i in range(n_nib):
            shift = 4 * (n_nib - 1 - i)
            nib = a >> shift if i == 0 else (a >> shift) & 0xF
            level = np.zeros_like(acc)
            for plane in booth_factor_planes(nib, 4 if i == 0 else 5, NIBBLE_BOOTH_LEVELS):
                level = level * 4 + plane @ wt.T
            acc = acc * 16 + level

    if acc.size and (acc.min() < ACC_MIN or acc.max() > ACC_MAX):
        raise OverflowError("32-bit accumulator overflowed")
    m, k = a.shape
    cycles = tint_cycles(m, wt.shape[0], k, geometry) * mode.iterations
    return acc.astype(np.int32), cycles
