"""Leading-one prediction for sparse KV fetching.

Every INT8 element is compressed to a sign bit and the 3-bit position of its
leading one, ``floor(log2 |x|)``.  A query/key surrogate score is then a sum
of signed powers of two,

    S(q, k) = sum_i sgn(q_i) sgn(k_i) 2**(LO(q_i) + LO(k_i)),

computed with shifts and adds only.  Zero elements carry a zero flag and
contribute nothing.  The highest-scoring tokens are picked by a bitwise
(comparison-free) top-k filter and only their full K/V rows are fetched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_int8_matrix
from .exceptions import KTooLarge, LengthMismatch, RangeError
from .tint import QTensor

DEFAULT_TOP_K = 32


class LOFeature(NamedTuple):
    sign: int
    lo_pos: int
    is_zero: bool


@dataclass(frozen=True)
class LOVector:
    """Compressed features of one INT8 vector, stored column-wise."""

    sign: np.ndarray  # +1 / -1 (zero elements carry +1)
    lo_pos: np.ndarray  # 0..7 (zero elements carry 0)
    is_zero: np.ndarray

    def __len__(self) -> int:
        return self.sign.shape[-1]

    def __getitem__(self, i) -> LOFeature:
        return LOFeature(int(self.sign[i]), int(self.lo_pos[i]), bool(self.is_zero[i]))

    @property
    def signed_magnitude(self) -> np.ndarray:
        """Per-element ``sgn * 2**LO`` (0 where flagged), as int64."""
        return np.where(self.is_zero, 0, self.sign.astype(np.int64) << self.lo_pos.astype(np.int64))


def lo_compress(x: int) -> LOFeature:
    x = int(x)
    if not -128 <= x <= 127:
        raise RangeError(f"{x} is not an INT8 value")
    if x == 0:
        return LOFeature(1, 0, True)
    return LOFeature(1 if x > 0 else -1, abs(x).bit_length() - 1, False)


def lo_compress_array(x) -> LOVector:
    """Vectorized :func:`lo_compress`; works on any shape (last axis = features)."""
    arr = np.asarray(x.data if isinstance(x, QTensor) else x, dtype=np.int64)
    if arr.size and (arr.min() < -128 or arr.max() > 127):
        raise RangeError("LO compression takes INT8 inputs")
    mag = np.abs(arr)
    is_zero = mag == 0
    # floor(log2 m) for m in 1..128 via bit length.
    lo = np.zeros(arr.shape, dtype=np.uint8)
    for b in range(1, 8):
        lo += (mag >= (1 << b)).astype(np.uint8)
    sign = np.where(arr < 0, -1, 1).astype(np.int8)
    return LOVector(sign, lo, is_zero)


def surrogate_score(q: LOVector, k: LOVector) -> int:
    """Shift-and-add score of one query/key pair (exact Python integer)."""
    if len(q) != len(k):
        raise LengthMismatch(f"query has {len(q)} features, key has {len(k)}")
    total = 0
    for i in range(len(q)):
        if q.is_zero[i] or k.is_zero[i]:
            continue
        term = 1 << (int(q.lo_pos[i]) + int(k.lo_pos[i]))
        total += term if q.sign[i] == k.sign[i] else -term
    return total


def surrogate_scores(q: LOVector, keys: LOVector) -> np.ndarray:
    """Scores of one query against a stack of keys (``keys`` fields shaped (M, d))."""
    if keys.sign.ndim != 2:
        raise LengthMismatch("keys must be a 2-D LO feature stack")
    if len(q) != keys.sign.shape[1]:
        raise LengthMismatch(f"query has {len(q)} features, keys have {keys.sign.shape[1]}")
    live = ~(q.is_zero[None, :] | keys.is_zero)
    shift = q.lo_pos.astype(np.int64)[None, :] + keys.lo_pos.astype(np.int64)
    same = q.sign[None, :] == keys.sign
    terms = np.where(live, np.where(same, 1, -1) << shift, 0)
    return terms.sum(axis=1)


class TopKResult(NamedTuple):
    indices: np.ndarray
    scores: np.ndarray


def _offset_binary(scores: np.ndarray) -> tuple[np.ndarray, int]:
    lo, hi = int(scores.min()), int(scores.max())
    width = max(lo.bit_length() if lo < 0 else 0, hi.bit_length()) + 1
    width = max(width, 1)
    # Flipping the sign bit of the two's-complement code == adding 2**(width-1).
    return scores.astype(np.int64) + (1 << (width - 1)), width


def topk_bitwise(scores, k: int) -> TopKResult:
    """Select the k largest scores by MSB-first bit-plane filtering.

    At each bit plane the surviving candidates with a 1 either all fit in the
    remaining slots (accept them, continue among the 0s) or outnumber them
    (keep only the 1s).  Candidates still tied after the last plane are taken
    lowest index first.  Indices are returned in stream (ascending) order.
    """
    s = np.asarray(scores, dtype=np.int64).ravel()
    if k < 1:
        raise ValueError("k must be positive")
    if k > s.size:
        raise KTooLarge(f"k={k} exceeds the {s.size} candidates")
    codes, width = _offset_binary(s)
    alive = np.ones(s.size, dtype=bool)
    chosen = np.zeros(s.size, dtype=bool)
    remaining = k
    for b in reversed(range(width)):
        if remaining == 0:
            break
        ones = alive & (((codes >> b) & 1) == 1)
        n_ones = int(ones.sum())
        if n_ones >= remaining:
            alive = ones
        else:
            chosen |= ones
            remaining -= n_ones
            alive &= ~ones
    if remaining:
        tied = np.flatnonzero(alive)[:remaining]
        chosen[tied] = True
    idx = np.flatnonzero(chosen)
    return TopKResult(idx, s[idx])


def topk_sort_oracle(scores, k: int) -> np.ndarray:
    """Reference selection: stable sort by descending score (lowest index wins ties)."""
    s = np.asarray(scores, dtype=np.int64).ravel()
    order = sorted(range(s.size), key=lambda i: (-int(s[i]), i))
    return np.array(sorted(order[:k]), dtype=np.int64)


def _stack(cache) -> LOVector:
    if isinstance(cache, LOVector):
        return cache
    cache = list(cache)
    if not cache:
        raise ValueError("LO cache is empty")
    return LOVector(
        np.stack([v.sign for v in cache]),
        np.stack([v.lo_pos for v in cache]),
        np.stack([v.is_zero for v in cache]),
    )


def select_kv(q, kv_lo_cache, k: int = DEFAULT_TOP_K) -> TopKResult:
    """Score a query against every cached key and keep the top k token indices.

    Caches no longer than k fall back to dense attention (every index).
    """
    q_lo = q if isinstance(q, LOVector) else lo_compress_array(np.asarray(q.data if isinstance(q, QTensor) else q).ravel())
    keys = _stack(kv_lo_cache)
    if keys.sign.shape[0] == 0:
        raise ValueError("LO cache is empty")
    scores = surrogate_scores(q_lo, keys)
    if scores.size <= k:
        return TopKResult(np.arange(scores.size), scores)
    return topk_bitwise(scores, k)


@dataclass(frozen=True)
class SparseAttnStats:
    tokens_total: int
    tokens_fetched: int
    bytes_dense: int
    bytes_fetched: int
    lo_bytes: float

    @property
    def fraction_saved(self) -> float:
        if self.tokens_total <= self.tokens_fetched:
            return 0.0
        return 1.0 - self.tokens_fetched / self.tokens_total

    @property
    def bytes_saved(self) -> float:
        """KV bytes avoided, net of the LO feature traffic."""
        return self.bytes_dense - self.bytes_fetched - self.lo_bytes

    @property
    def reduction_before_debit(self) -> float:
        return self.bytes_dense / self.bytes_fetched if self.bytes_fetched else math.inf

    @property
    def reduction_after_debit(self) -> float:
        spent = self.bytes_fetched + self.lo_bytes
        return self.bytes_dense / spent if spent else math.inf


def ema_savings(M: int, k: int, bytes_per_token: int, lo_elements_per_token: int | None = None,
                lo_feature_bits: int = 4) -> SparseAttnStats:
    """KV-cache traffic with and without top-k fetching for a cache of M tokens.

    ``bytes_per_token`` is the full K+V row size.  LO features cover the key
    only; by default that is half of ``bytes_per_token`` INT8 elements.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if k < 1:
        raise ValueError("k must be >= 1")
    fetched = min(k, M)
    lo_elems = bytes_per_token // 2 if lo_elements_per_token is None else lo_elements_per_token
    return SparseAttnStats(
        tokens_total=M,
        tokens_fetched=fetched,
        bytes_dense=M * bytes_per_token,
        bytes_fetched=fetched * bytes_per_token,
        lo_bytes=M * lo_elems * lo_feature_bits / 8,
    )


# --- LO cache serialization ------------------------------------------------
#
# Two 4-bit features per byte, first feature in the low nibble; a feature is
# (sign << 3) | lo_pos with sign bit 1 for negative.  Zero elements are
# written as 0b0000 and flagged in a bitmap (LSB-first) appended after the
# nibbles, since 0b0000 is also the encoding of +1.

def serialize_lo_vector(v: LOVector) -> bytes:
    d = len(v)
    nib = ((v.sign < 0).astype(np.uint8) << 3) | v.lo_pos.astype(np.uint8)
    nib = np.where(v.is_zero, 0, nib).astype(np.uint8)
    if d % 2:
        nib = np.append(nib, np.uint8(0))
    packed = (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8)
    bitmap = np.packbits(v.is_zero.astype(np.uint8), bitorder="little")
    return packed.tobytes() + bitmap.tobytes()


def lo_vector_nbytes(d: int) -> int:
    return math.ceil(d / 2) + math.ceil(d / 8)


def deserialize_lo_vector(blob: bytes, d: int) -> LOVector:
    if len(blob) != lo_vector_nbytes(d):
        raise LengthMismatch(f"expected {lo_vector_nbytes(d)} bytes for {d} features, got {len(blob)}")
    raw = np.frombuffer(blob, dtype=np.uint8)
    n_packed = math.ceil(d / 2)
    packed, bitmap = raw[:n_packed], raw[n_packed:]
    nib = np.empty(n_packed * 2, dtype=np.uint8)
    nib[0::2] = packed & 0xF
    nib[1::2] = packed >> 4
    nib = nib[:d]
    is_zero = np.unpackbits(bitmap, bitorder="little")[:d].astype(bool)
    sign = np.where((nib >> 3) & 1, -1, 1).astype(np.int8)
    lo = (nib & 0x7).astype(np.uint8)
    return LOVector(sign, lo, is_zero)


# --- recall study helpers ---------------------------------------------------

def exact_topk(q, keys, k: int) -> np.ndarray:
    """Top-k token indices by the exact integer dot product (lowest index wins ties)."""
    scores = np.asarray(keys, dtype=np.int64) @ np.asarray(q, dtype=np.int64).ravel()
    return topk_sort_oracle(scores, min(k, scores.size))


def topk_recall(q, keys, k: int) -> float:
    """Fraction of the exact top-k that the LO surrogate also selects."""
    keys = np.asarray(keys)
    chosen = select_kv(np.asarray(q).ravel(), lo_compress_array(keys), k).indices
    truth = exact_topk(q, keys, k)
    return len(set(chosen.tolist()) & set(truth.tolist())) / len(truth)


class LOPSelector(BaseEstimator):
    """Top-k key selector over a fitted key cache.

    ``fit`` compresses an INT8 key matrix (tokens x head_dim) into the LO
    cache; ``decision_function`` returns surrogate scores per query row and
    ``predict`` the selected token indices (ascending, ``min(k, M)`` each).
    """

    def __init__(self, k: int = DEFAULT_TOP_K):
        self.k = k

    def fit(self, X, y=None):
        keys = check_int8_matrix(X, "keys")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        self.lo_cache_ = lo_compress_array(keys)
        self.n_features_in_ = keys.shape[1]
        self.n_tokens_ = keys.shape[0]
        return self

    def _queries(self, Q) -> np.ndarray:
        check_is_fitted(self, "lo_cache_")
        Q = check_int8_matrix(Q, "queries")
        if Q.shape[1] != self.n_features_in_:
            raise LengthMismatch(f"queries have {Q.shape[1]} features, cache has {self.n_features_in_}")
        return Q

    def decision_function(self, Q) -> np.ndarray:
        Q = self._queries(Q)
        return np.vstack([surrogate_scores(lo_compress_array(q), self.lo_cache_) for q in Q])

    def predict(self, Q) -> np.ndarray:
        Q = self._queries(Q)
        return np.vstack([select_kv(lo_compress_array(q), self.lo_cache_, self.k).indices for q in Q])
