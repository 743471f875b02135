"""Toy-scale BitNet-style inference on the modeled datapaths.

Every projection is an absmax-INT8 x ternary product on the TINT model
(Q/K/V) or split between TINT and BoothFlex ternary mode (W_O, FFN).  QK^T
and S.V run on BoothFlex INT8 mode; softmax is the two-stage unified-max
form.  Tokens are processed one at a time against an INT8 KV cache, so the
prompt and the generated tokens share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .boothflex import INT8_INT8, TERNARY_INT8, boothflex_matmul
from .exceptions import ShapeMismatch
from .lop import LOVector, lo_compress_array, select_kv
from .nonlinear import UNIFIED_MAX, absmax_quantize, rmsnorm_two_stage, two_stage_softmax
from .perf import DECODE, PRESETS, HardwareSpec, ModelSpec, PhaseTrace, Toggles, schedule_heads
from .tint import QTensor, matmul as tint_matmul
from .trit_codec import TritTensor

FFN_ACTIVATIONS = ("relu2", "relu", "silu")
PROJECTIONS = ("wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down")


@dataclass(frozen=True)
class RunConfig:
    lop_enabled: bool = False
    k: int = 32
    unified_max: float = UNIFIED_MAX
    seed: int = 0
    max_new_tokens: int = 8
    lop_prefill: bool = False
    rope: bool = False
    ffn_activation: str = "relu2"
    softmax_tile: int = 8

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not math.isfinite(self.unified_max):
            raise ValueError("unified_max must be finite")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")
        if self.ffn_activation not in FFN_ACTIVATIONS:
            raise ValueError(f"ffn_activation must be one of {FFN_ACTIVATIONS}")


@dataclass
class LayerWeights:
    wq: TritTensor
    wk: TritTensor
    wv: TritTensor
    wo: TritTensor
    w_up: TritTensor
    w_down: TritTensor
    attn_norm: np.ndarray
    ffn_norm: np.ndarray
    scales: dict[str, float]
    w_gate: TritTensor | None = None


@dataclass
class ToyModel:
    spec: ModelSpec
    layers: list[LayerWeights]
    embedding: np.ndarray
    final_norm: np.ndarray
    lm_head: np.ndarray | None = None  # None ties the head to the embedding

    def __post_init__(self):
        s = self.spec
        if len(self.layers) != s.layers:
            raise ShapeMismatch(f"{len(self.layers)} layer weight sets for a {s.layers}-layer model")
        if self.embedding.shape != (s.vocab, s.d_model):
            raise ShapeMismatch(f"embedding shape {self.embedding.shape} != {(s.vocab, s.d_model)}")
        if self.lm_head is not None and self.lm_head.shape != (s.vocab, s.d_model):
            raise ShapeMismatch(f"lm_head shape {self.lm_head.shape} != {(s.vocab, s.d_model)}")
        expect = {
            "wq": (s.heads * s.head_dim, s.d_model), "wk": (s.kv_dim, s.d_model), "wv": (s.kv_dim, s.d_model),
            "wo": (s.d_model, s.heads * s.head_dim), "w_up": (s.ffn_dim, s.d_model),
            "w_down": (s.d_model, s.ffn_dim),
        }
        if s.gated_ffn:
            expect["w_gate"] = (s.ffn_dim, s.d_model)
        for i, layer in enumerate(self.layers):
            for name, shape in expect.items():
                w = getattr(layer, name)
                if not isinstance(w, TritTensor) or w.shape != shape:
                    got = getattr(w, "shape", None)
                    raise ShapeMismatch(f"layer {i} {name}: expected ternary {shape}, got {got}")

    @classmethod
    def random(cls, spec: ModelSpec | None = None, seed: int = 0, p_zero: float = 1 / 3) -> "ToyModel":
        spec = spec or PRESETS["toy"]
        rng = np.random.default_rng(seed)
        d, f = spec.d_model, spec.ffn_dim
        layers = []
        for _ in range(spec.layers):
            shapes = {
                "wq": (spec.heads * spec.head_dim, d), "wk": (spec.kv_dim, d), "wv": (spec.kv_dim, d),
                "wo": (d, spec.heads * spec.head_dim), "w_up": (f, d), "w_down": (d, f),
            }
            if spec.gated_ffn:
                shapes["w_gate"] = (f, d)
            weights = {name: TritTensor.random(*shape, rng=rng, p_zero=p_zero) for name, shape in shapes.items()}
            # Keep activations O(1): a ternary row of fan-in n has ~2n/3 nonzeros.
            scales = {name: float(1.0 / math.sqrt(shape[1])) for name, shape in shapes.items()}
            layers.append(LayerWeights(
                **weights,
                attn_norm=1.0 + 0.1 * rng.standard_normal(d),
                ffn_norm=1.0 + 0.1 * rng.standard_normal(d),
                scales=scales,
            ))
        embedding = rng.standard_normal((spec.vocab, d))
        final_norm = 1.0 + 0.1 * rng.standard_normal(d)
        head = None if spec.tied_embeddings else rng.standard_normal((spec.vocab, d))
        return cls(spec, layers, embedding, final_norm, head)

    @property
    def output_embedding(self) -> np.ndarray:
        return self.embedding if self.lm_head is None else self.lm_head

    def with_zero_weights(self) -> "ToyModel":
        def zero(w):
            return None if w is None else TritTensor(np.zeros(w.shape, dtype=np.int8))

        layers = [replace(l, **{n: zero(getattr(l, n)) for n in PROJECTIONS}) for l in self.layers]
        return replace(self, layers=layers)


class KVCache:
    """INT8 K/V rows with per-row scales and the parallel LO-feature cache."""

    def __init__(self, layers: int, kv_heads: int, head_dim: int):
        self.head_dim = head_dim
        self._k = [[[] for _ in range(kv_heads)] for _ in range(layers)]
        self._v = [[[] for _ in range(kv_heads)] for _ in range(layers)]
        self._lo = [[[] for _ in range(kv_heads)] for _ in range(layers)]

    def append(self, layer: int, head: int, k: QTensor, v: QTensor) -> None:
        if k.cols != self.head_dim or v.cols != self.head_dim:
            raise ShapeMismatch("K/V rows must have head_dim elements")
        self._k[layer][head].append(k)
        self._v[layer][head].append(v)
        self._lo[layer][head].append(lo_compress_array(k.data[0]))

    def length(self, layer: int = 0, head: int = 0) -> int:
        return len(self._k[layer][head])

    def __len__(self) -> int:
        return self.length() if self._k else 0

    def keys(self, layer: int, head: int, idx=None) -> tuple[np.ndarray, np.ndarray]:
        rows = self._k[layer][head]
        rows = rows if idx is None else [rows[i] for i in idx]
        return np.vstack([r.data for r in rows]), np.array([r.scale for r in rows])

    def values(self, layer: int, head: int, idx=None) -> tuple[np.ndarray, np.ndarray]:
        rows = self._v[layer][head]
        rows = rows if idx is None else [rows[i] for i in idx]
        return np.vstack([r.data for r in rows]), np.array([r.scale for r in rows])

    def lo_cache(self, layer: int, head: int) -> list[LOVector]:
        return self._lo[layer][head]

    def check_coherence(self) -> None:
        """Raise AssertionError unless every LO entry matches its stored K row."""
        for layer_k, layer_v, layer_lo in zip(self._k, self._v, self._lo):
            for ks, vs, los in zip(layer_k, layer_v, layer_lo):
                if not len(ks) == len(vs) == len(los):
                    raise AssertionError("K, V and LO cache lengths differ")
                for kq, lo in zip(ks, los):
                    ref = lo_compress_array(kq.data[0])
                    if not (np.array_equal(ref.sign, lo.sign) and np.array_equal(ref.lo_pos, lo.lo_pos)
                            and np.array_equal(ref.is_zero, lo.is_zero)):
                        raise AssertionError("LO cache entry differs from lo_compress of its K row")


@dataclass
class EMACounters:
    """External memory bytes for one token (weights at 1.6 bits per trit)."""

    weight_bytes: float = 0.0
    kv_read_bytes: int = 0
    lo_read_bytes: float = 0.0
    kv_write_bytes: int = 0
    kv_rows_fetched: int = 0
    kv_rows_total: int = 0

    @property
    def total(self) -> float:
        return self.weight_bytes + self.kv_read_bytes + self.lo_read_bytes + self.kv_write_bytes


def rope(x: np.ndarray, pos: int, base: float = 10000.0) -> np.ndarray:
    """Rotate-half rotary embedding of one head vector."""
    half = x.size // 2
    freqs = base ** (-np.arange(half) / half)
    ang = pos * freqs
    cos, sin = np.cos(ang), np.sin(ang)
    x1, x2 = x[:half], x[half:2 * half]
    out = x.copy()
    out[:half] = x1 * cos - x2 * sin
    out[half:2 * half] = x1 * sin + x2 * cos
    return out


def _ffn_act(u: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu2":
        return np.square(np.maximum(u, 0.0))
    if kind == "relu":
        return np.maximum(u, 0.0)
    return u / (1.0 + np.exp(-u))


def dual_core_matmul(q: QTensor, w: TritTensor, tint_share: float) -> np.ndarray:
    """Ternary projection with output channels split between TINT and BoothFlex."""
    n_tint = int(round(w.rows * tint_share))
    parts = []
    if n_tint:
        parts.append(tint_matmul(q, w[:n_tint]))
    if n_tint < w.rows:
        parts.append(boothflex_matmul(q, w[n_tint:], TERNARY_INT8)[0])
    return np.hstack(parts)


class _Recorder:
    def __init__(self, sink: dict | None, token: int):
        self.sink = sink
        self.token = token

    def __call__(self, layer: int, name: str, value) -> None:
        if self.sink is not None:
            self.sink[(self.token, layer, name)] = np.array(value, copy=True)


def _projection(x: np.ndarray, w: TritTensor, scale: float, tint_share: float | None, rec, layer, name):
    xq = absmax_quantize(x)
    acc = tint_matmul(xq, w) if tint_share is None else dual_core_matmul(xq, w, tint_share)
    rec(layer, name + ".in", xq.data)
    rec(layer, name, acc)
    return acc[0].astype(np.float64) / xq.scale * scale


def forward_block(x, layer: int, cache: KVCache, cfg: RunConfig, model: ToyModel, pos: int | None = None,
                  decode: bool = True, hw: HardwareSpec | None = None, counters: EMACounters | None = None,
                  record: dict | None = None, token: int = 0) -> np.ndarray:
    """One transformer block for one token; appends this token's K/V to ``cache``."""
    spec = model.spec
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != spec.d_model:
        raise ShapeMismatch(f"block input has {x.size} elements, d_model is {spec.d_model}")
    hw = hw or HardwareSpec()
    share = hw.tint_core_count / (hw.tint_core_count + hw.boothflex_count)
    W = model.layers[layer]
    rec = _Recorder(record, token)
    pos = cache.length(layer) if pos is None else pos
    dk = spec.head_dim

    h = rmsnorm_two_stage(x, W.attn_norm)
    hq = absmax_quantize(h)
    rec(layer, "attn.in", hq.data)
    q_acc = tint_matmul(hq, W.wq)
    k_acc = tint_matmul(hq, W.wk)
    v_acc = tint_matmul(hq, W.wv)
    rec(layer, "wq", q_acc)
    rec(layer, "wk", k_acc)
    rec(layer, "wv", v_acc)
    q_real = q_acc[0] / hq.scale * W.scales["wq"]
    k_real = k_acc[0] / hq.scale * W.scales["wk"]
    v_real = v_acc[0] / hq.scale * W.scales["wv"]

    for g in range(spec.kv_heads):
        kh = k_real[g * dk:(g + 1) * dk]
        if cfg.rope:
            kh = rope(kh, pos)
        kq = absmax_quantize(kh)
        vq = absmax_quantize(v_real[g * dk:(g + 1) * dk])
        cache.append(layer, g, kq, vq)
        if counters is not None:
            counters.kv_write_bytes += 2 * dk
    use_lop = cfg.lop_enabled if decode else (cfg.lop_enabled and cfg.lop_prefill)

    heads_out = []
    for hd in range(spec.heads):
        g = hd // spec.group_size
        qh = q_real[hd * dk:(hd + 1) * dk]
        if cfg.rope:
            qh = rope(qh, pos)
        qq = absmax_quantize(qh)
        T = cache.length(layer, g)
        if use_lop:
            sel = select_kv(qq, cache.lo_cache(layer, g), cfg.k)
            idx = sel.indices
            rec(layer, f"h{hd}.lop_scores", sel.scores)
            if counters is not None:
                counters.lo_read_bytes += T * dk * hw.lo_feature_bits / 8
        else:
            idx = np.arange(T)
        rec(layer, f"h{hd}.idx", idx)
        K, k_scales = cache.keys(layer, g, idx)
        V, v_scales = cache.values(layer, g, idx)
        if counters is not None:
            counters.kv_read_bytes += 2 * dk * len(idx)
            counters.kv_rows_fetched += len(idx)
            counters.kv_rows_total += T
        s_acc = boothflex_matmul(qq, K, INT8_INT8)[0][0]
        rec(layer, f"h{hd}.qk", s_acc)
        scores = s_acc / (qq.scale * k_scales) / math.sqrt(dk)
        p = two_stage_softmax(scores, cfg.unified_max, cfg.softmax_tile)
        # V rows carry their own scales; fold them into the probabilities.
        pq = absmax_quantize(p / v_scales)
        rec(layer, f"h{hd}.p", pq.data)
        o_acc = boothflex_matmul(pq, V.T, INT8_INT8)[0][0]
        rec(layer, f"h{hd}.sv", o_acc)
        heads_out.append(o_acc / pq.scale)
    attn = np.concatenate(heads_out)

    x = x + _projection(attn, W.wo, W.scales["wo"], share, rec, layer, "wo")
    h2 = rmsnorm_two_stage(x, W.ffn_norm)
    h2q = absmax_quantize(h2)
    rec(layer, "w_up.in", h2q.data)
    up_acc = dual_core_matmul(h2q, W.w_up, share)
    rec(layer, "w_up", up_acc)
    u = up_acc[0] / h2q.scale * W.scales["w_up"]
    a = _ffn_act(u, cfg.ffn_activation)
    if W.w_gate is not None:
        gate_acc = dual_core_matmul(h2q, W.w_gate, share)
        rec(layer, "w_gate", gate_acc)
        a = _ffn_act(gate_acc[0] / h2q.scale * W.scales["w_gate"], cfg.ffn_activation) * u
    x = x + _projection(a, W.w_down, W.scales["w_down"], share, rec, layer, "w_down")
    return x


def logits(model: ToyModel, h: np.ndarray) -> np.ndarray:
    hn = rmsnorm_two_stage(h, model.final_norm)
    return model.output_embedding @ hn


def forward_token(model: ToyModel, token_id: int, cache: KVCache, cfg: RunConfig, decode: bool,
                  hw: HardwareSpec | None = None, counters: EMACounters | None = None,
                  record: dict | None = None, token: int = 0) -> np.ndarray:
    if not 0 <= token_id < model.spec.vocab:
        raise ValueError(f"token id {token_id} outside vocabulary of {model.spec.vocab}")
    pos = len(cache)
    x = model.embedding[token_id].copy()
    for layer in range(model.spec.layers):
        x = forward_block(x, layer, cache, cfg, model, pos, decode, hw, counters, record, token)
    return logits(model, x)


@dataclass
class GenerationResult:
    tokens: list[int]
    prompt_len: int
    traces: list[PhaseTrace] = field(default_factory=list)
    counters: list[EMACounters] = field(default_factory=list)
    cache: KVCache | None = None

    @property
    def new_tokens(self) -> list[int]:
        return self.tokens[self.prompt_len:]


def generate(model: ToyModel, prompt: Sequence[int], cfg: RunConfig | None = None,
             hw: HardwareSpec | None = None, record: dict | None = None) -> GenerationResult:
    """Greedy decoding.  Ties in the logits go to the lowest token id."""
    cfg = cfg or RunConfig()
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    hw = hw or HardwareSpec()
    spec = model.spec
    cache = KVCache(spec.layers, spec.kv_heads, spec.head_dim)
    weight_bytes = spec.param_count * hw.weight_bits_per_trit / 8
    result = GenerationResult(list(prompt), len(prompt), cache=cache)
    out = None
    for i, t in enumerate(prompt):
        out = forward_token(model, t, cache, cfg, decode=False, hw=hw, record=record, token=i)
    toggles = Toggles(lop=cfg.lop_enabled, lop_k=cfg.k)
    for step in range(cfg.max_new_tokens):
        nxt = int(np.argmax(out))
        result.tokens.append(nxt)
        if step == cfg.max_new_tokens - 1:
            break
        counters = EMACounters(weight_bytes=weight_bytes)
        out = forward_token(model, nxt, cache, cfg, decode=True, hw=hw, counters=counters, record=record,
                            token=len(result.tokens) - 1)
        result.counters.append(counters)
        result.traces.append(schedule_heads(spec, hw, DECODE, len(cache), toggles))
    return result
