"""Streaming nonlinear operations and activation quantization.

Softmax and RMSNorm are split into a tile-streaming first stage (element-wise
work plus a running reduction) and a deferred second stage that applies the
global divisor.  Softmax subtracts a static ``unified_max`` instead of the
dynamic row maximum, so stage 1 never waits for the whole vector; inputs
above the bound are still computed and counted in ``overflow_count``.

Quantization is symmetric absmax to [-127, 127] with round-half-away-from-zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_real_matrix
from .exceptions import LengthMismatch, ZeroSum
from .tint import QTensor

UNIFIED_MAX = 16.0
RMS_EPS = 1e-5
QMAX = 127


def round_half_away(x):
    """Round to nearest integer, ties away from zero (numpy arrays or scalars)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass
class SoftmaxState:
    unified_max: float = UNIFIED_MAX
    running_sum: float = 0.0
    overflow_count: int = 0


def softmax_stage1(tile, state: SoftmaxState) -> np.ndarray:
    """Emit ``exp(x - unified_max)`` for one tile and fold its sum into ``state``."""
    x = np.asarray(tile, dtype=np.float64).ravel()
    partial = np.exp(x - state.unified_max)
    state.running_sum += float(partial.sum())
    state.overflow_count += int(np.count_nonzero(x > state.unified_max))
    return partial


def softmax_stage2(state: SoftmaxState, partials) -> np.ndarray:
    if not state.running_sum > 0:
        raise ZeroSum("softmax denominator underflowed to zero")
    if isinstance(partials, np.ndarray):
        return partials / state.running_sum
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in partials]) / state.running_sum


def _tiles(x: np.ndarray, tile: int) -> Iterable[np.ndarray]:
    if tile < 1:
        raise ValueError("tile size must be positive")
    for start in range(0, x.size, tile):
        yield x[start:start + tile]


def two_stage_softmax(x, unified_max: float = UNIFIED_MAX, tile: int = 8, state: SoftmaxState | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    state = SoftmaxState(unified_max) if state is None else state
    partials = [softmax_stage1(t, state) for t in _tiles(x, tile)]
    return softmax_stage2(state, partials)


@dataclass
class RMSState:
    running_sq_sum: float = 0.0
    count: int = 0
    epsilon: float = RMS_EPS

    @property
    def inv_rms(self) -> float:
        return 1.0 / math.sqrt(self.running_sq_sum / self.count + self.epsilon)


def rmsnorm_stage1(x_tile, w_tile, state: RMSState) -> np.ndarray:
    x = np.asarray(x_tile, dtype=np.float64).ravel()
    w = np.asarray(w_tile, dtype=np.float64).ravel()
    if x.shape != w.shape:
        raise LengthMismatch(f"tile of {x.size} inputs paired with {w.size} weights")
    state.running_sq_sum += float(np.dot(x, x))
    state.count += x.size
    return x * w


def rmsnorm_two_stage(x, w, eps: float = RMS_EPS, tile: int = 8) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    if x.shape != w.shape:
        raise LengthMismatch(f"{x.size} inputs but {w.size} norm weights")
    if x.size == 0:
        raise LengthMismatch("RMSNorm needs a non-empty vector")
    state = RMSState(epsilon=eps)
    partials = [rmsnorm_stage1(xt, wt, state) for xt, wt in zip(_tiles(x, tile), _tiles(w, tile))]
    return np.concatenate(partials) * state.inv_rms


@dataclass(frozen=True)
class QuantParams:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("quantization scale must be positive")

    @classmethod
    def from_absmax(cls, absmax: float) -> "QuantParams":
        scale = QMAX / absmax if absmax > 0 else 1.0
        # A subnormal absmax would overflow the scale; saturate instead of producing inf * 0.
        return cls(min(scale, np.finfo(np.float64).max))


@dataclass(frozen=True)
class FusedScale:
    """Deferred divisor folded into the quantization scale: ``scale / divisor``."""

    factor: float

    @classmethod
    def combine(cls, divisor: float, q: QuantParams) -> "FusedScale":
        if not divisor > 0:
            raise ValueError("divisor must be positive")
        return cls(q.scale / divisor)


def quantize_with(x, q: QuantParams) -> np.ndarray:
    return np.clip(round_half_away(np.asarray(x, dtype=np.float64) * q.scale), -QMAX, QMAX).astype(np.int8)


def absmax_quantize(x) -> QTensor:
    """Per-vector symmetric INT8 quantization (1 x n QTensor)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise LengthMismatch("cannot quantize an empty vector")
    q = QuantParams.from_absmax(float(np.max(np.abs(x))))
    return QTensor(quantize_with(x, q), q.scale)


def fused_output(partial: float, divisor: float, q: QuantParams) -> int:
    """Quantize ``partial / divisor`` with a single multiply by the fused scale."""
    fused = FusedScale.combine(divisor, q)
    return int(np.clip(round_half_away(partial * fused.factor), -QMAX, QMAX))


def unfused_output(partial: float, divisor: float, q: QuantParams) -> int:
    """Divide first, then quantize; the reference for :func:`fused_output`."""
    if not divisor > 0:
        raise ValueError("divisor must be positive")
    return int(quantize_with(partial / divisor, q).ravel()[0])


# --- Q-friendly two-level scheduling ---------------------------------------

@dataclass(frozen=True)
class ScheduleEvent:
    kind: str  # "tile" or "barrier"
    vector: int
    tile: int
    cycle: int


@dataclass
class TwoLevelTrace:
    events: list[ScheduleEvent] = field(default_factory=list)
    outputs: list[QTensor] = field(default_factory=list)

    @property
    def barriers(self) -> list[ScheduleEvent]:
        return [e for e in self.events if e.kind == "barrier"]

    @property
    def tiles(self) -> list[ScheduleEvent]:
        return [e for e in self.events if e.kind == "tile"]

    def stalls(self) -> int:
        """Idle cycles between consecutive tiles of the same vector."""
        idle = 0
        prev: ScheduleEvent | None = None
        for e in self.events:
            if e.kind == "tile" and prev is not None and prev.kind == "tile" and prev.vector == e.vector:
                idle += e.cycle - prev.cycle - 1
            prev = e
        return idle


def two_level_schedule(vectors: Iterable[Sequence], tile_op: Callable[[np.ndarray], np.ndarray] | None = None,
                       barrier_cycles: int = 1) -> TwoLevelTrace:
    """Run tile streams vector by vector with a quantization barrier after each.

    Tiles inside a vector issue back to back (one per cycle) while the
    running absmax is tracked; the barrier finalizes the scale and quantizes
    the whole vector before the next vector may start.
    """
    trace = TwoLevelTrace()
    cycle = 0
    for v, tiles in enumerate(vectors):
        absmax = 0.0
        produced = []
        for t, tile in enumerate(tiles):
            out = np.asarray(tile, dtype=np.float64).ravel()
            if tile_op is not None:
                out = np.asarray(tile_op(out), dtype=np.float64).ravel()
            absmax = max(absmax, float(np.max(np.abs(out))) if out.size else 0.0)
            produced.append(out)
            trace.events.append(ScheduleEvent("tile", v, t, cycle))
            cycle += 1
        q = QuantParams.from_absmax(absmax)
        full = np.concatenate(produced) if produced else np.zeros(1)
        trace.outputs.append(QTensor(quantize_with(full, q), q.scale))
        trace.events.append(ScheduleEvent("barrier", v, -1, cycle))
        cycle += barrier_cycles
    return trace


class AbsmaxQuantizer(BaseEstimator, TransformerMixin):
    """Static-scale symmetric INT8 quantizer calibrated on training data.

    ``per="tensor"`` keeps one scale, ``per="feature"`` one per column.
    Values beyond the calibrated range clamp to +-127.
    """

    def __init__(self, per: str = "tensor"):
        self.per = per

    def fit(self, X, y=None):
        X = check_real_matrix(X)
        if self.per == "tensor":
            absmax = np.full(X.shape[1], np.max(np.abs(X)))
        elif self.per == "feature":
            absmax = np.max(np.abs(X), axis=0)
        else:
            raise ValueError(f"per must be 'tensor' or 'feature', got {self.per!r}")
        self.scale_ = np.where(absmax > 0, QMAX / np.where(absmax > 0, absmax, 1.0), 1.0)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "scale_")
        X = check_real_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise LengthMismatch(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return np.clip(round_half_away(X * self.scale_), -QMAX, QMAX).astype(np.int8)

    def inverse_transform(self, Xq) -> np.ndarray:
        check_is_fitted(self, "scale_")
        return np.asarray(Xq, dtype=np.float64) / self.scale_
