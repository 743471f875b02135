"""Ternary weight storage.

Two encodings are modeled:

* the 2-bit per-weight code fed to the Booth encoder (+1 -> 0b01, 0 -> 0b00,
  -1 -> 0b11), and
* the dense base-3 packing of five trits per byte (1.6 bits/weight), decoded
  through a 243-entry lookup table.

Digit order inside a packed byte is LSB-first: the first trit of a group is
the 3**0 digit.  Partial groups are padded with trit 0.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import InvalidCode, InvalidPackedByte, ShapeMismatch

TRITS_PER_BYTE = 5
N_PACKED_CODES = 3**TRITS_PER_BYTE  # 243

_ENCODE_2BIT = {1: 0b01, 0: 0b00, -1: 0b11}
_DECODE_2BIT = {v: k for k, v in _ENCODE_2BIT.items()}
_PLACE_VALUES = np.array([3**i for i in range(TRITS_PER_BYTE)], dtype=np.int64)


def _check_trits(values: np.ndarray) -> None:
    if values.size and (values.min() < -1 or values.max() > 1):
        raise ValueError("trit values must lie in {-1, 0, +1}")


@dataclass(frozen=True)
class TritTensor:
    """Row-major ternary matrix (weight rows are output channels)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatch(f"TritTensor needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError("trit values must be integers")
        _check_trits(arr)
        arr = arr.astype(np.int8)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def random(cls, rows: int, cols: int, rng=None, p_zero: float = 1 / 3) -> "TritTensor":
        rng = np.random.default_rng(rng)
        p_side = (1.0 - p_zero) / 2
        data = rng.choice(np.array([-1, 0, 1], dtype=np.int8), size=(rows, cols), p=[p_side, p_zero, p_side])
        return cls(data)

    def __getitem__(self, key) -> "TritTensor":
        return TritTensor(self.data[key])


@dataclass(frozen=True)
class PackedTritStream:
    data: bytes
    trit_count: int

    def __post_init__(self):
        if self.trit_count < 0:
            raise ValueError("trit_count must be nonnegative")
        if len(self.data) != math.ceil(self.trit_count / TRITS_PER_BYTE):
            raise ValueError(
                f"{len(self.data)} bytes cannot hold exactly {self.trit_count} trits"
            )
        bad = [b for b in self.data if b >= N_PACKED_CODES]
        if bad:
            raise InvalidPackedByte(f"packed byte {bad[0]} >= {N_PACKED_CODES}")

    @property
    def bits_per_trit(self) -> Fraction:
        return Fraction(8, TRITS_PER_BYTE)


def encode_2bit(t: int) -> int:
    try:
        return _ENCODE_2BIT[int(t)]
    except KeyError:
        raise ValueError(f"not a trit: {t!r}") from None


def decode_2bit(code: int) -> int:
    try:
        return _DECODE_2BIT[int(code)]
    except KeyError:
        raise InvalidCode(f"invalid 2-bit ternary code {int(code):#04b}") from None


def _build_unpack_lut() -> np.ndarray:
    codes = np.arange(N_PACKED_CODES)
    digits = (codes[:, None] // _PLACE_VALUES[None, :]) % 3
    lut = (digits - 1).astype(np.int8)
    lut.setflags(write=False)
    return lut


UNPACK_LUT = _build_unpack_lut()


def pack_trits(trits: Iterable[int]) -> PackedTritStream:
    values = np.asarray(list(trits) if not isinstance(trits, np.ndarray) else trits, dtype=np.int64).ravel()
    _check_trits(values)
    n = values.size
    n_bytes = math.ceil(n / TRITS_PER_BYTE)
    padded = np.zeros(n_bytes * TRITS_PER_BYTE, dtype=np.int64)
    padded[:n] = values
    groups = padded.reshape(-1, TRITS_PER_BYTE) + 1
    return PackedTritStream(bytes((groups @ _PLACE_VALUES).astype(np.uint8).tolist()), n)


def unpack_byte(b: int) -> tuple[int, ...]:
    b = int(b)
    if not 0 <= b < N_PACKED_CODES:
        raise InvalidPackedByte(f"packed byte {b} is outside [0, {N_PACKED_CODES})")
    return tuple(int(t) for t in UNPACK_LUT[b])


def unpack_trits(stream: PackedTritStream) -> np.ndarray:
    raw = np.frombuffer(stream.data, dtype=np.uint8)
    if raw.size and raw.max() >= N_PACKED_CODES:
        raise InvalidPackedByte(f"packed byte {int(raw.max())} >= {N_PACKED_CODES}")
    return UNPACK_LUT[raw].ravel()[: stream.trit_count].copy()


class Packing(enum.Enum):
    FIVE_TRIT_BYTE = "five_trit_byte"
    TWO_BIT = "two_bit"


def traffic_ratio(packing: Packing) -> Fraction:
    """Storage cost in bits per weight."""
    if packing is Packing.FIVE_TRIT_BYTE:
        return Fraction(8, TRITS_PER_BYTE)
    if packing is Packing.TWO_BIT:
        return Fraction(2)
    raise ValueError(f"unknown packing {packing!r}")


def traffic_reduction(packing: Packing = Packing.FIVE_TRIT_BYTE, baseline: Packing = Packing.TWO_BIT) -> Fraction:
    return 1 - traffic_ratio(packing) / traffic_ratio(baseline)


# --- packed weight files ---------------------------------------------------
#
# 16-byte header: b"TPK1", rows (u32 LE), cols (u32 LE), reserved u32 = 0,
# then each row packed independently to a 5-trit boundary.

MAGIC = b"TPK1"
_HEADER = struct.Struct("<4sIII")


def bytes_per_row(cols: int) -> int:
    return math.ceil(cols / TRITS_PER_BYTE)


def encode_tensor(w: TritTensor) -> bytes:
    chunks = [_HEADER.pack(MAGIC, w.rows, w.cols, 0)]
    chunks.extend(pack_trits(row).data for row in w.data)
    return b"".join(chunks)


def decode_tensor(blob: bytes) -> TritTensor:
    if len(blob) < _HEADER.size:
        raise ValueError("truncated packed weight file")
    magic, rows, cols, reserved = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if reserved != 0:
        raise ValueError("reserved header field must be zero")
    stride = bytes_per_row(cols)
    body = blob[_HEADER.size:]
    if len(body) != rows * stride:
        raise ValueError(f"expected {rows * stride} payload bytes, found {len(body)}")
    out = np.empty((rows, cols), dtype=np.int8)
    for r in range(rows):
        out[r] = unpack_trits(PackedTritStream(body[r * stride:(r + 1) * stride], cols))
    return TritTensor(out)


def write_packed(path, w: TritTensor) -> None:
    Path(path).write_bytes(encode_tensor(w))


def read_packed(path) -> TritTensor:
    return decode_tensor(Path(path).read_bytes())


# --- plain-text trit matrices (one row per line, space separated) -----------

def format_trit_text(w: TritTensor) -> str:
    return "".join(" ".join(str(int(t)) for t in row) + "\n" for row in w.data)


def parse_trit_text(text: str) -> TritTensor:
    rows: list[Sequence[int]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([int(tok) for tok in line.split()])
        except ValueError:
            raise ValueError(f"line {lineno}: non-integer entry") from None
    if not rows:
        raise ShapeMismatch("trit file holds no rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ShapeMismatch(f"ragged trit file: row widths {sorted(widths)}")
    return TritTensor(np.array(rows, dtype=np.int64))
