"""Multiplier-free Ternary x INT8 core.

Each PE holds one output-stationary accumulator and applies the selection
rule ``y += sel(w, a)`` with ``sel(w, a) in {+a, 0, -a}``.  A PE array of
``pe_rows x pe_cols`` maps weight rows (output channels) onto PE rows and
activation rows (tokens) onto PE columns, so one tile produces a
``pe_cols x pe_rows`` block of ``output[m, n] = sum_k act[m, k] * w[n, k]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_real_matrix
from .exceptions import ShapeMismatch
from .trit_codec import TritTensor

ACC_MIN = -(2**31)
ACC_MAX = 2**31 - 1


@dataclass(frozen=True)
class CoreGeometry:
    pe_rows: int = 8
    pe_cols: int = 8

    def __post_init__(self):
        if self.pe_rows < 1 or self.pe_cols < 1:
            raise ValueError("PE array dimensions must be positive")

    @property
    def ops_per_cycle(self) -> int:
        return self.pe_rows * self.pe_cols


DEFAULT_GEOMETRY = CoreGeometry()


@dataclass(frozen=True)
class QTensor:
    """Symmetric 8-bit tensor with one per-tensor scale (real = data / scale)."""

    data: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.size == 0:
            raise ShapeMismatch(f"QTensor needs a non-empty 2-D array, got shape {arr.shape}")
        if arr.min() < -128 or arr.max() > 127:
            raise ValueError("QTensor elements must lie in [-128, 127]")
        if not self.scale > 0:
            raise ValueError("QTensor scale must be positive")
        arr = arr.astype(np.int8)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) / self.scale

    @classmethod
    def random(cls, rows: int, cols: int, rng=None, low: int = -128, high: int = 127) -> "QTensor":
        rng = np.random.default_rng(rng)
        return cls(rng.integers(low, high + 1, size=(rows, cols)), 1.0)


def sel(w: int, a: int) -> int:
    """Ternary selection; the result is at accumulator width so sel(-1, -128) == 128."""
    if w == 1:
        return int(a)
    if w == 0:
        return 0
    if w == -1:
        return -int(a)
    raise ValueError(f"not a trit: {w!r}")


@dataclass
class TrafficCounter:
    """Partial-sum and operand traffic seen by one PE array."""

    psum_reads: int = 0
    psum_writes: int = 0
    act_reads: int = 0
    weight_reads: int = 0
    macs: int = 0
    cycles: int = 0

    def reset(self) -> None:
        for name in self.__dataclass_fields__:
            setattr(self, name, 0)


@dataclass
class PEArray:
    """Accumulator state of one TINT core.

    ``acc[r, c]`` is the stationary partial sum for weight row r (output
    channel) and activation row c (token).  Accumulators are only read out
    by :meth:`drain`, which is where partial-sum writes are counted.
    """

    geometry: CoreGeometry = DEFAULT_GEOMETRY
    acc: np.ndarray = field(default=None)
    counter: TrafficCounter = field(default_factory=TrafficCounter)

    def __post_init__(self):
        if self.acc is None:
            self.acc = np.zeros((self.geometry.pe_rows, self.geometry.pe_cols), dtype=np.int64)

    def clear(self) -> None:
        self.acc[:] = 0

    def drain(self, n_rows: int | None = None, n_cols: int | None = None) -> np.ndarray:
        """Write the finished tile out and reset; returns ``acc`` transposed to (token, channel)."""
        n_rows = self.geometry.pe_rows if n_rows is None else n_rows
        n_cols = self.geometry.pe_cols if n_cols is None else n_cols
        out = self.acc[:n_rows, :n_cols]
        if out.size and (out.min() < ACC_MIN or out.max() > ACC_MAX):
            raise OverflowError("32-bit PE accumulator overflowed")
        self.counter.psum_writes += out.size
        result = out.T.astype(np.int32)
        self.clear()
        return result


def tile_matmul_os(act_tile, w_tile, state: PEArray) -> PEArray:
    """Accumulate one output-stationary tile into ``state``.

    ``act_tile`` is (tokens, k) with tokens <= pe_cols, ``w_tile`` is
    (channels, k) with channels <= pe_rows.  Each cycle consumes one k-slice:
    the activation column is broadcast and each PE row selects on its own
    weight.  Accumulators never leave the array here.
    """
    a = act_tile.data if isinstance(act_tile, QTensor) else np.asarray(act_tile)
    w = w_tile.data if isinstance(w_tile, TritTensor) else np.asarray(w_tile)
    if a.ndim != 2 or w.ndim != 2:
        raise ShapeMismatch("tiles must be 2-D")
    geom = state.geometry
    if a.shape[0] > geom.pe_cols or w.shape[0] > geom.pe_rows:
        raise ShapeMismatch(
            f"tile {w.shape[0]}x{a.shape[0]} exceeds the {geom.pe_rows}x{geom.pe_cols} PE array"
        )
    if a.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape[1]} vs {w.shape[1]}")
    k = a.shape[1]
    a64 = a.astype(np.int64)
    # sel(w, a): add the activations whose weight is +1, subtract those at -1.
    plus = (w == 1).astype(np.int64)
    minus = (w == -1).astype(np.int64)
    state.acc[: w.shape[0], : a.shape[0]] += plus @ a64.T - minus @ a64.T
    c = state.counter
    c.macs += w.shape[0] * a.shape[0] * k
    c.act_reads += a.shape[0] * k
    c.weight_reads += w.shape[0] * k
    c.cycles += k
    return state


def _as_act(act) -> np.ndarray:
    arr = act.data if isinstance(act, QTensor) else np.asarray(act)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def _as_trits(w) -> np.ndarray:
    return w.data if isinstance(w, TritTensor) else TritTensor(w).data


def matmul(act, w, geometry: CoreGeometry = DEFAULT_GEOMETRY, state: PEArray | None = None) -> np.ndarray:
    """Exact ``output[m, n] = sum_k act[m, k] * w[n, k]`` on the tiled PE array.

    Edge tiles are zero-padded; padding contributes nothing.  Returns an
    int32 (m, n) matrix.  Pass ``state`` to observe traffic counters.
    """
    a = _as_act(act)
    wt = _as_trits(w)
    if a.shape[1] != wt.shape[1]:
        raise ShapeMismatch(f"activation has {a.shape[1]} columns, weights have {wt.shape[1]}")
    state = PEArray(geometry) if state is None else state
    geom = state.geometry
    m, n = a.shape[0], wt.shape[0]
    out = np.empty((m, n), dtype=np.int32)
    for m0 in range(0, m, geom.pe_cols):
        a_tile = a[m0:m0 + geom.pe_cols]
        for n0 in range(0, n, geom.pe_rows):
            w_tile = wt[n0:n0 + geom.pe_rows]
            tile_matmul_os(a_tile, w_tile, state)
            out[m0:m0 + a_tile.shape[0], n0:n0 + w_tile.shape[0]] = state.drain(w_tile.shape[0], a_tile.shape[0])
    return out


def tint_cycles(m: int, n: int, k: int, geometry: CoreGeometry = DEFAULT_GEOMETRY) -> int:
    """Cycles for an (m x k) @ (k x n) product: one k-slice per cycle per tile."""
    if min(m, n, k) < 1:
        raise ValueError("matrix dimensions must be >= 1")
    return math.ceil(m / geometry.pe_cols) * math.ceil(n / geometry.pe_rows) * k


def gemv_cycles(n: int, k: int, geometry: CoreGeometry = DEFAULT_GEOMETRY, cores: int = 1) -> int:
    """Single-token (m = 1) cycles with every PE owning a distinct output channel.

    The activation element is broadcast to all PEs and each PE receives a
    unique weight, so the array retires ``pe_rows * pe_cols`` MACs per cycle.
    Work is balanced at MAC granularity across ``cores`` arrays.
    """
    if n < 0 or k < 0:
        raise ValueError("dimensions must be nonnegative")
    return math.ceil(n * k / (geometry.ops_per_cycle * cores))


class TernaryLinear(BaseEstimator, TransformerMixin):
    """BitLinear-style layer: absmax INT8 activations times ternary weights.

    ``weights`` has one row per output feature.  Each input row is quantized
    on its own (per-token absmax) before the integer product.
    """

    def __init__(self, weights=None, weight_scale: float = 1.0, geometry: CoreGeometry = DEFAULT_GEOMETRY):
        self.weights = weights
        self.weight_scale = weight_scale
        self.geometry = geometry

    def fit(self, X, y=None):
        if self.weights is None:
            raise ValueError("TernaryLinear needs a weight matrix")
        self.weights_ = self.weights if isinstance(self.weights, TritTensor) else TritTensor(self.weights)
        X = check_real_matrix(X)
        if X.shape[1] != self.weights_.cols:
            raise ShapeMismatch(f"X has {X.shape[1]} features, weights expect {self.weights_.cols}")
        self.n_features_in_ = self.weights_.cols
        return self

    def transform_int(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Integer accumulators and the per-row activation scales."""
        from .nonlinear import absmax_quantize

        check_is_fitted(self, "weights_")
        X = check_real_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeMismatch(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        rows = [absmax_quantize(x) for x in X]
        q = np.vstack([r.data for r in rows])
        scales = np.array([r.scale for r in rows])
        return matmul(q, self.weights_, self.geometry), scales

    def transform(self, X) -> np.ndarray:
        acc, scales = self.transform_int(X)
        return acc.astype(np.float64) / scales[:, None] * self.weight_scale
