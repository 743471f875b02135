"""Input checks shared by the estimator front ends."""

import numpy as np
from sklearn.utils import check_array

from .exceptions import RangeError


def check_real_matrix(X) -> np.ndarray:
    return check_array(X, dtype=np.float64, ensure_2d=True)


def check_int8_matrix(X, name: str = "X") -> np.ndarray:
    arr = check_array(X, dtype=None, ensure_2d=True)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError(f"{name} must hold integers")
    arr = arr.astype(np.int64)
    if arr.min() < -128 or arr.max() > 127:
        raise RangeError(f"{name} must hold INT8 values in [-128, 127]")
    return arr


def signed_range(width: int) -> tuple[int, int]:
    return -(1 << (width - 1)), (1 << (width - 1)) - 1


def check_signed(value: int, width: int, name: str = "operand") -> int:
    lo, hi = signed_range(width)
    value = int(value)
    if not lo <= value <= hi:
        raise RangeError(f"{name}={value} does not fit in {width} signed bits")
    return value
