"""Analytical schedule and roofline model of the heterogeneous accelerator.

A layer is scheduled as a sequence of *steps*.  Every step starts when the
previous one ends and holds one or more concurrent lanes (a lane is a chain
of operations on one or more cores).  A step lasts as long as its slowest
lane or as long as its DRAM traffic needs at the sustained read / write
bandwidth, whichever is larger::

    step = max(max_lane_cycles, read_bytes / bw, write_bytes / bw)

Head-level pipelining puts the projections of head h and the attention of
head h-1 into the same step.  W_O, FFN and the LM head run on the TINT
cluster and, with dual-core co-execution, on the BoothFlex core in ternary
mode with output channels split in proportion to throughput.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import InfeasibleSchedule
from .lop import DEFAULT_TOP_K
from .tint import CoreGeometry, gemv_cycles

PREFILL = "prefill"
DECODE = "decode"
DEFAULT_PROMPT_LEN = 64
DEFAULT_DECODE_CONTEXT = 2048
INT8_BOOTH_STEPS = 5


@dataclass(frozen=True)
class HardwareSpec:
    tint_core_count: int = 3
    pe_rows: int = 8
    pe_cols: int = 8
    boothflex_count: int = 1
    frequency_hz: float = 1e9
    dram_bw: float = 76.8e9  # bytes/s, read and write channels each
    weight_bits_per_trit: float = 1.6
    activation_bits: int = 8
    lo_feature_bits: int = 4
    lop_lanes: int = 64
    topk_bits: int = 24
    barrier_cycles: int = 1
    bit_serial: bool = False

    def __post_init__(self):
        for name in ("tint_core_count", "pe_rows", "pe_cols", "boothflex_count", "frequency_hz",
                     "dram_bw", "weight_bits_per_trit", "activation_bits", "lo_feature_bits", "lop_lanes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"HardwareSpec.{name} must be positive")
        if self.barrier_cycles < 0 or self.topk_bits < 0:
            raise ValueError("cycle overheads must be nonnegative")

    @property
    def geometry(self) -> CoreGeometry:
        return CoreGeometry(self.pe_rows, self.pe_cols)

    @property
    def bytes_per_cycle(self) -> float:
        return self.dram_bw / self.frequency_hz

    @property
    def ternary_pass_cycles(self) -> int:
        """Cycles per 8-bit activation in ternary mode (2 nibbles when bit-serial)."""
        return self.activation_bits // 4 if self.bit_serial else 1

    @property
    def int8_pass_cycles(self) -> int:
        return self.activation_bits // 4 if self.bit_serial else INT8_BOOTH_STEPS

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HardwareSpec":
        return cls(**_known_fields(cls, data.get("hardware", data)))


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: int
    d_model: int
    heads: int
    head_dim: int
    ffn_dim: int
    vocab: int
    kv_heads: int | None = None
    gated_ffn: bool = True
    tied_embeddings: bool = False
    nominal_params: float | None = None

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layers must be nonnegative")
        for name in ("d_model", "heads", "head_dim", "ffn_dim", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelSpec.{name} must be positive")
        if self.heads * self.head_dim != self.d_model:
            raise ValueError(f"heads * head_dim = {self.heads * self.head_dim} != d_model = {self.d_model}")
        if self.kv_heads is None:
            object.__setattr__(self, "kv_heads", self.heads)
        if self.heads % self.kv_heads:
            raise ValueError("heads must be a multiple of kv_heads")
        if self.nominal_params is not None and self.layers > 0:
            drift = abs(self.param_count - self.nominal_params) / self.nominal_params
            if drift > 0.05:
                raise ValueError(
                    f"{self.name}: dimensions give {self.param_count:.4g} parameters, "
                    f"{drift:.1%} away from the nominal {self.nominal_params:.4g}"
                )

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.heads // self.kv_heads

    @property
    def attn_params_per_layer(self) -> int:
        return 2 * self.d_model * self.d_model + 2 * self.d_model * self.kv_dim

    @property
    def ffn_params_per_layer(self) -> int:
        return (3 if self.gated_ffn else 2) * self.d_model * self.ffn_dim

    @property
    def lm_head_params(self) -> int:
        return self.vocab * self.d_model

    @property
    def param_count(self) -> int:
        """Weights streamed per decoded token: every projection plus the LM head."""
        return self.layers * (self.attn_params_per_layer + self.ffn_params_per_layer) + self.lm_head_params

    @property
    def total_params(self) -> int:
        return self.param_count + (0 if self.tied_embeddings else self.vocab * self.d_model)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(**_known_fields(cls, data.get("model", data)))


def _known_fields(cls, data: dict) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dict(data)


# Public BitNet-family dimensions; the 7B/13B rows use the LLaMA shapes the
# ternary model family was trained at.
PRESETS = {
    "2b": ModelSpec("2b", layers=30, d_model=2560, heads=20, head_dim=128, ffn_dim=6912, vocab=128256,
                    kv_heads=5, tied_embeddings=True, nominal_params=2.4e9),
    "3b": ModelSpec("3b", layers=26, d_model=3200, heads=32, head_dim=100, ffn_dim=8640, vocab=32002,
                    nominal_params=3.32e9),
    "7b": ModelSpec("7b", layers=32, d_model=4096, heads=32, head_dim=128, ffn_dim=11008, vocab=32000,
                    nominal_params=6.7e9),
    "13b": ModelSpec("13b", layers=40, d_model=5120, heads=40, head_dim=128, ffn_dim=13824, vocab=32000,
                     nominal_params=13.0e9),
    "toy": ModelSpec("toy", layers=2, d_model=64, heads=4, head_dim=16, ffn_dim=128, vocab=256,
                     gated_ffn=False),
}


def get_model(name_or_spec) -> ModelSpec:
    if isinstance(name_or_spec, ModelSpec):
        return name_or_spec
    key = str(name_or_spec).lower()
    if key in PRESETS:
        return PRESETS[key]
    path = Path(name_or_spec)
    if path.exists():
        return load_model(path)
    raise ValueError(f"unknown model preset {name_or_spec!r}; choose from {sorted(PRESETS)} or give a file")


def get_hardware(name_or_spec=None) -> HardwareSpec:
    if name_or_spec is None or isinstance(name_or_spec, HardwareSpec):
        return name_or_spec or HardwareSpec()
    if str(name_or_spec) == "default":
        return HardwareSpec()
    return load_hardware(name_or_spec)


def load_hardware(path) -> HardwareSpec:
    return HardwareSpec.from_dict(json.loads(Path(path).read_text()))


def load_model(path) -> ModelSpec:
    data = json.loads(Path(path).read_text())
    data = data.get("model", data)
    data.setdefault("name", Path(path).stem)
    return ModelSpec.from_dict(data)


@dataclass(frozen=True)
class Toggles:
    lop: bool = True
    head_pipeline: bool = True
    dual_core: bool = True
    lop_k: int = DEFAULT_TOP_K
    lop_prefill: bool = False

    def __post_init__(self):
        if self.lop_k < 1:
            raise ValueError("lop_k must be >= 1")


class Event(NamedTuple):
    core: str
    op: str
    head: int
    start: int
    end: int
    layer: int = -1


TINT = "tint"
BOOTHFLEX = "boothflex"
LOP = "lop"


@dataclass
class Step:
    phase: str
    start: int
    duration: int
    compute: int
    read_bytes: float
    write_bytes: float


@dataclass
class PhaseTrace:
    events: list[Event] = field(default_factory=list)
    barriers: list[int] = field(default_factory=list)
    steps: list[Step] = field(default_factory=list)
    frequency_hz: float = 1e9
    pipelined: bool = True

    @property
    def total_cycles(self) -> int:
        return self.steps[-1].start + self.steps[-1].duration if self.steps else 0

    @property
    def seconds(self) -> float:
        return self.total_cycles / self.frequency_hz

    def phase_cycles(self, phase: str) -> int:
        return sum(s.duration for s in self.steps if s.phase == phase)

    def phase_bytes(self, phase: str) -> tuple[float, float]:
        sel = [s for s in self.steps if s.phase == phase]
        return sum(s.read_bytes for s in sel), sum(s.write_bytes for s in sel)

    @property
    def read_bytes(self) -> float:
        return sum(s.read_bytes for s in self.steps)

    @property
    def write_bytes(self) -> float:
        return sum(s.write_bytes for s in self.steps)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["core", "op", "head", "start", "end"])
        for e in self.events:
            writer.writerow([e.core, e.op, e.head, e.start, e.end])
        return buf.getvalue()

    def validate(self) -> None:
        """Raise AssertionError if the trace breaks a scheduling invariant."""
        by_core: dict[str, list[Event]] = {}
        for e in self.events:
            by_core.setdefault(e.core, []).append(e)
        for core, evs in by_core.items():
            evs = sorted(evs, key=lambda e: (e.start, e.end))
            for a, b in zip(evs, evs[1:]):
                if b.start < a.end:
                    raise AssertionError(f"overlapping events on {core}: {a} / {b}")
        proj_end = {}
        for e in self.events:
            if e.op == "qkv":
                proj_end[(e.layer, e.head)] = e.end
        for e in self.events:
            if e.op in ("lop_score", "attn"):
                if e.start < proj_end.get((e.layer, e.head), math.inf):
                    raise AssertionError(f"attention of head {e.head} starts before its projection ends")
                if self.pipelined:
                    for p in self.events:
                        if p.op == "qkv" and p.layer == e.layer and p.start < e.end and e.start < p.end:
                            if p.head != e.head + 1:
                                raise AssertionError(f"attention head {e.head} overlaps projection head {p.head}")


class _Builder:
    def __init__(self, hw: HardwareSpec):
        self.hw = hw
        self.trace = PhaseTrace(frequency_hz=hw.frequency_hz)
        self.now = 0

    def barrier(self, phase: str) -> None:
        self.trace.barriers.append(self.now)
        if self.hw.barrier_cycles:
            self.trace.steps.append(Step(phase, self.now, self.hw.barrier_cycles, self.hw.barrier_cycles, 0.0, 0.0))
            self.now += self.hw.barrier_cycles

    def step(self, phase: str, lanes: Sequence[Sequence[tuple]], read_bytes: float, write_bytes: float,
             layer: int) -> None:
        """``lanes`` holds chains of (core, op, head, cycles); chains run concurrently."""
        compute = max((sum(op[3] for op in lane) for lane in lanes), default=0)
        bw = self.hw.bytes_per_cycle
        duration = max(compute, math.ceil(read_bytes / bw), math.ceil(write_bytes / bw))
        if duration == 0:
            return
        stretch = duration > compute
        for lane in lanes:
            t = self.now
            for i, (core, op, head, cycles) in enumerate(lane):
                if cycles <= 0:
                    continue
                end = t + cycles
                if stretch and i == len(lane) - 1:
                    end = self.now + duration
                self.trace.events.append(Event(core, op, head, t, end, layer))
                t = end
        self.trace.steps.append(Step(phase, self.now, duration, compute, read_bytes, write_bytes))
        self.now += duration


def _split_channels(n: int, hw: HardwareSpec, dual_core: bool) -> tuple[int, int]:
    if not dual_core:
        return n, 0
    share = hw.tint_core_count / (hw.tint_core_count + hw.boothflex_count)
    n_tint = int(round(n * share))
    return n_tint, n - n_tint


def _ternary_op(b: _Builder, phase: str, op: str, m: int, n: int, k: int, dual_core: bool, layer: int,
                act_reads: float = 0.0, writes: float = 0.0) -> None:
    """A ternary projection (m tokens x k inputs -> n outputs) on TINT (+ BoothFlex)."""
    hw = b.hw
    geom = hw.geometry
    wbytes = n * k * hw.weight_bits_per_trit / 8
    pc = geom.pe_cols
    if m == 1:
        n_t, n_b = _split_channels(n, hw, dual_core)
        c_t = gemv_cycles(n_t, k, geom, hw.tint_core_count) * hw.ternary_pass_cycles
        c_b = gemv_cycles(n_b, k, geom, hw.boothflex_count) * hw.ternary_pass_cycles
        weight_reads = wbytes
    else:
        token_groups = math.ceil(m / pc)
        tiles = token_groups * math.ceil(n / geom.pe_rows)
        t_tiles, b_tiles = _split_channels(tiles, hw, dual_core)
        c_t = math.ceil(t_tiles / hw.tint_core_count) * k * hw.ternary_pass_cycles
        c_b = math.ceil(b_tiles / hw.boothflex_count) * k * hw.ternary_pass_cycles
        # The activation tile of one token group stays in the quantized buffer
        # while every weight row streams past it.
        weight_reads = wbytes * token_groups
    lanes = [[(TINT, op, -1, c_t)]]
    if c_b:
        lanes.append([(BOOTHFLEX, op, -1, c_b)])
    b.step(phase, lanes, weight_reads + act_reads, writes, layer)


def _attention_ops(model: ModelSpec, hw: HardwareSpec, stage: str, seq_len: int, toggles: Toggles, head: int):
    """Lane and traffic of one head's attention (after its projections)."""
    dk = model.head_dim
    lanes = []
    reads = 0.0
    act_b = hw.activation_bits / 8
    if stage == DECODE:
        use_lop = toggles.lop and seq_len > toggles.lop_k
        s_eff = min(seq_len, toggles.lop_k) if use_lop else seq_len
        if use_lop:
            lop_cycles = math.ceil(seq_len * dk / hw.lop_lanes) + hw.topk_bits
            lanes.append((LOP, "lop_score", head, lop_cycles))
            reads += seq_len * dk * hw.lo_feature_bits / 8
        # QK^T and S.V: s_eff * dk MACs each on one Booth array, INT8 mode.
        macs = 2 * s_eff * dk
        attn_cycles = math.ceil(macs / hw.geometry.ops_per_cycle) * hw.int8_pass_cycles
        lanes.append((BOOTHFLEX, "attn", head, attn_cycles))
        reads += s_eff * 2 * dk * act_b
    else:
        q_tiles = math.ceil(seq_len / hw.pe_cols)
        causal_tiles = q_tiles * (q_tiles + 1) // 2
        qk = causal_tiles * dk
        sv = causal_tiles * math.ceil(dk / hw.pe_rows) * hw.pe_cols
        lanes.append((BOOTHFLEX, "attn", head, (qk + sv) * hw.int8_pass_cycles))
    return lanes, reads


def _projection_op(model: ModelSpec, hw: HardwareSpec, stage: str, m: int, head: int, toggles: Toggles):
    dk = model.head_dim
    makes_kv = head % model.group_size == 0
    n = dk + (2 * dk if makes_kv else 0)
    k = model.d_model
    geom = hw.geometry
    wbytes = n * k * hw.weight_bits_per_trit / 8
    if m == 1:
        cycles = gemv_cycles(n, k, geom, hw.tint_core_count) * hw.ternary_pass_cycles
        reads = wbytes
    else:
        groups = math.ceil(m / geom.pe_cols)
        tiles = groups * math.ceil(n / geom.pe_rows)
        cycles = math.ceil(tiles / hw.tint_core_count) * k * hw.ternary_pass_cycles
        reads = wbytes * groups
    writes = 0.0
    if makes_kv:
        writes = m * 2 * dk * hw.activation_bits / 8
        lop_on = toggles.lop if stage == DECODE else toggles.lop_prefill
        if lop_on or stage == PREFILL:
            writes += m * dk * hw.lo_feature_bits / 8
    return (TINT, "qkv", head, cycles), reads, writes


def schedule_heads(model, hw: HardwareSpec | None = None, stage: str = DECODE, seq_len: int = DEFAULT_DECODE_CONTEXT,
                   toggles: Toggles | None = None) -> PhaseTrace:
    """Timeline of one forward pass.

    ``stage="decode"`` schedules one new token against a KV cache of
    ``seq_len`` tokens; ``stage="prefill"`` schedules a prompt of ``seq_len``
    tokens.
    """
    model = get_model(model)
    hw = get_hardware(hw)
    toggles = toggles or Toggles()
    if stage not in (PREFILL, DECODE):
        raise ValueError(f"stage must be {PREFILL!r} or {DECODE!r}")
    if seq_len < 0 or (stage == DECODE and seq_len < 1):
        raise ValueError("seq_len must be >= 1")
    b = _Builder(hw)
    b.trace.pipelined = toggles.head_pipeline
    if seq_len == 0:
        return b.trace
    m = 1 if stage == DECODE else seq_len
    ctx = seq_len
    H = model.heads
    for layer in range(model.layers):
        b.barrier("attention")
        projs = [_projection_op(model, hw, stage, m, h, toggles) for h in range(H)]
        attns = [_attention_ops(model, hw, stage, ctx, toggles, h) for h in range(H)]
        if toggles.head_pipeline:
            for s in range(H + 1):
                lanes, reads, writes = [], 0.0, 0.0
                if s < H:
                    op, r, w = projs[s]
                    lanes.append([op])
                    reads += r
                    writes += w
                if s >= 1:
                    chain, r = attns[s - 1]
                    lanes.append(chain)
                    reads += r
                b.step("attention", lanes, reads, writes, layer)
        else:
            for op, r, w in projs:
                b.step("attention", [[op]], r, w, layer)
            for chain, r in attns:
                b.step("attention", [chain], r, 0.0, layer)
        d = model.d_model
        b.barrier("ffn")
        _ternary_op(b, "ffn", "wo", m, d, H * model.head_dim, toggles.dual_core, layer)
        b.barrier("ffn")
        n_up = model.ffn_dim * (2 if model.gated_ffn else 1)
        _ternary_op(b, "ffn", "ffn_up", m, n_up, d, toggles.dual_core, layer)
        b.barrier("ffn")
        _ternary_op(b, "ffn", "ffn_down", m, d, model.ffn_dim, toggles.dual_core, layer)
    if model.layers:
        b.barrier("lm_head")
        # Only the last position needs logits, in both stages.
        _ternary_op(b, "lm_head", "lm_head", 1, model.vocab, model.d_model, toggles.dual_core, model.layers)
    return b.trace


def buffer_requirement(trace: PhaseTrace) -> int:
    """Maximum number of heads whose Q/K/V tensors are alive at once."""
    spans: dict[tuple[int, int], list[int]] = {}
    for e in trace.events:
        if e.op in ("qkv", "lop_score", "attn") and e.head >= 0:
            lo_hi = spans.setdefault((e.layer, e.head), [e.start, e.end])
            lo_hi[0] = min(lo_hi[0], e.start)
            lo_hi[1] = max(lo_hi[1], e.end)
    points = []
    for lo, hi in spans.values():
        points.append((lo, 1))
        points.append((hi, -1))
    live = peak = 0
    for _, delta in sorted(points, key=lambda p: (p[0], p[1])):
        live += delta
        peak = max(peak, live)
    return peak


# --- derived figures -------------------------------------------------------

def estimate_decode_throughput(model, hw: HardwareSpec | None = None, seq_len: int = DEFAULT_DECODE_CONTEXT,
                               lop_enabled: bool = True, k: int = DEFAULT_TOP_K,
                               toggles: Toggles | None = None) -> float:
    """Tokens per second for one decode step at context ``seq_len``."""
    toggles = replace(toggles or Toggles(), lop=lop_enabled, lop_k=k)
    trace = schedule_heads(model, hw, DECODE, seq_len, toggles)
    return 1.0 / trace.seconds if trace.total_cycles else math.inf


def estimate_prefill_latency(model, hw: HardwareSpec | None = None, prompt_len: int = DEFAULT_PROMPT_LEN,
                             toggles: Toggles | None = None) -> float:
    if prompt_len < 0:
        raise ValueError("prompt_len must be >= 0")
    if prompt_len == 0:
        return 0.0
    return schedule_heads(model, hw, PREFILL, prompt_len, toggles).seconds


def bandwidth_profile(model, hw: HardwareSpec | None = None, stage: str = DECODE, seq_len: int | None = None,
                      toggles: Toggles | None = None, strict: bool = True) -> tuple[float, float]:
    """Peak (read, write) DRAM demand in GB/s over the schedule.

    With ``strict`` an InfeasibleSchedule is raised when no step can run at
    its compute rate, i.e. the whole schedule is bandwidth-starved.
    """
    hw = get_hardware(hw)
    if seq_len is None:
        seq_len = DEFAULT_DECODE_CONTEXT if stage == DECODE else DEFAULT_PROMPT_LEN
    trace = schedule_heads(model, hw, stage, seq_len, toggles)
    data_steps = [s for s in trace.steps if s.read_bytes or s.write_bytes]
    if not data_steps:
        return 0.0, 0.0
    if strict and all(s.duration > s.compute for s in data_steps):
        raise InfeasibleSchedule(
            f"every data-moving step is bandwidth-bound at {hw.dram_bw / 1e9:.1f} GB/s"
        )
    f = hw.frequency_hz / 1e9
    peak_r = max(s.read_bytes / s.duration for s in data_steps) * f
    peak_w = max(s.write_bytes / s.duration for s in data_steps) * f
    return peak_r, peak_w


@dataclass
class PerfReport:
    model: str
    tint_core_count: int
    seq_len: int
    prompt_len: int
    prefill_seconds: float
    decode_tokens_per_s: float
    peak_read_GBps: float
    peak_write_GBps: float
    prefill_peak_read_GBps: float
    prefill_peak_write_GBps: float
    ema_bytes: float
    buffer_heads_required: int
    lop_enabled: bool
    lop_k: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def perf_report(model, hw: HardwareSpec | None = None, seq_len: int = DEFAULT_DECODE_CONTEXT,
                prompt_len: int = DEFAULT_PROMPT_LEN, toggles: Toggles | None = None) -> PerfReport:
    model = get_model(model)
    hw = get_hardware(hw)
    toggles = toggles or Toggles()
    decode = schedule_heads(model, hw, DECODE, seq_len, toggles)
    read, write = bandwidth_profile(model, hw, DECODE, seq_len, toggles, strict=False)
    p_read, p_write = bandwidth_profile(model, hw, PREFILL, prompt_len, toggles, strict=False) if prompt_len else (0.0, 0.0)
    return PerfReport(
        model=model.name,
        tint_core_count=hw.tint_core_count,
        seq_len=seq_len,
        prompt_len=prompt_len,
        prefill_seconds=estimate_prefill_latency(model, hw, prompt_len, toggles),
        decode_tokens_per_s=1.0 / decode.seconds if decode.total_cycles else math.inf,
        peak_read_GBps=read,
        peak_write_GBps=write,
        prefill_peak_read_GBps=p_read,
        prefill_peak_write_GBps=p_write,
        ema_bytes=decode.read_bytes + decode.write_bytes,
        buffer_heads_required=buffer_requirement(decode) if model.layers else 0,
        lop_enabled=toggles.lop,
        lop_k=toggles.lop_k,
    )


# --- ablation --------------------------------------------------------------

ABLATION_TOGGLES = ("lop", "head_pipeline", "dual_core")


def _phase_stats(model, hw, seq_len, toggles):
    trace = schedule_heads(model, hw, DECODE, seq_len, toggles)
    attn = trace.phase_cycles("attention")
    ffn = trace.phase_cycles("ffn")
    kv_reads = sum(s.read_bytes for s in trace.steps if s.phase == "attention")
    return {"attention": attn, "ffn": ffn, "overall": trace.total_cycles}, trace


def _kv_bytes(model: ModelSpec, hw: HardwareSpec, seq_len: int, toggles: Toggles) -> tuple[float, float]:
    """KV rows fetched and LO feature bytes for one decode token across all layers."""
    rows = min(seq_len, toggles.lop_k) if (toggles.lop and seq_len > toggles.lop_k) else seq_len
    kv = model.layers * model.heads * rows * 2 * model.head_dim * hw.activation_bits / 8
    lo = 0.0
    if toggles.lop and seq_len > toggles.lop_k:
        lo = model.layers * model.heads * seq_len * model.head_dim * hw.lo_feature_bits / 8
    return kv, lo


def ablate(model, hw: HardwareSpec | None = None, toggles: Iterable[str] = ABLATION_TOGGLES,
           seq_len: int = DEFAULT_DECODE_CONTEXT, base: Toggles | None = None) -> dict:
    """Throughput ratio (toggle on / toggle off) per decode phase.

    Each named toggle is flipped on top of ``base`` (all features on by
    default).  The ``"combined"`` entry compares all named toggles on against
    all off.  The LOP entry also carries attention EMA reduction factors.
    """
    model = get_model(model)
    hw = get_hardware(hw)
    base = base or Toggles()
    names = list(toggles)
    for name in names:
        if name not in ABLATION_TOGGLES:
            raise ValueError(f"unknown toggle {name!r}")

    def ratios(on: Toggles, off: Toggles) -> dict:
        c_on, _ = _phase_stats(model, hw, seq_len, on)
        c_off, _ = _phase_stats(model, hw, seq_len, off)
        return {phase: (c_off[phase] / c_on[phase]) if c_on[phase] else math.nan for phase in c_on}

    out = {}
    for name in names:
        on, off = replace(base, **{name: True}), replace(base, **{name: False})
        entry = ratios(on, off)
        if name == "lop":
            kv_on, lo_on = _kv_bytes(model, hw, seq_len, on)
            kv_off, _ = _kv_bytes(model, hw, seq_len, off)
            entry["attention_ema_reduction"] = kv_off / kv_on if kv_on else math.inf
            entry["attention_ema_reduction_after_debit"] = kv_off / (kv_on + lo_on) if kv_on + lo_on else math.inf
        out[name] = entry
    out["combined"] = ratios(replace(base, **{n: True for n in names}), replace(base, **{n: False for n in names}))
    return out


# --- estimator front end ---------------------------------------------------

class PerformanceModel(BaseEstimator):
    """Roofline performance model with a single calibrated knob.

    ``fit(models, tokens_per_s)`` picks the integer TINT core count that best
    reproduces the measured decode throughputs (least squares in log space)
    and freezes it; ``predict(models)`` returns decode tokens/s.
    """

    def __init__(self, hardware: HardwareSpec | None = None, seq_len: int = DEFAULT_DECODE_CONTEXT,
                 prompt_len: int = DEFAULT_PROMPT_LEN, lop: bool = True, k: int = DEFAULT_TOP_K,
                 head_pipeline: bool = True, dual_core: bool = True, max_cores: int = 64):
        self.hardware = hardware
        self.seq_len = seq_len
        self.prompt_len = prompt_len
        self.lop = lop
        self.k = k
        self.head_pipeline = head_pipeline
        self.dual_core = dual_core
        self.max_cores = max_cores

    @property
    def _toggles(self) -> Toggles:
        return Toggles(lop=self.lop, head_pipeline=self.head_pipeline, dual_core=self.dual_core, lop_k=self.k)

    def _throughput(self, hw: HardwareSpec, models: Sequence) -> np.ndarray:
        return np.array([estimate_decode_throughput(m, hw, self.seq_len, self.lop, self.k, self._toggles)
                         for m in models])

    def fit(self, X, y):
        models = [get_model(m) for m in X]
        target = np.asarray(y, dtype=np.float64).ravel()
        if len(models) != target.size or not models:
            raise ValueError("need one throughput target per model")
        if np.any(target <= 0):
            raise ValueError("throughput targets must be positive")
        base = get_hardware(self.hardware)
        best = None
        for n in range(1, self.max_cores + 1):
            hw = replace(base, tint_core_count=n)
            err = float(np.sum(np.log(self._throughput(hw, models) / target) ** 2))
            if best is None or err < best[0]:
                best = (err, n)
        self.tint_core_count_ = best[1]
        self.hardware_ = replace(base, tint_core_count=best[1])
        self.calibration_error_ = math.sqrt(best[0] / len(models))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "hardware_")
        return self._throughput(self.hardware_, [get_model(m) for m in X])

    def predict_prefill(self, X) -> np.ndarray:
        check_is_fitted(self, "hardware_")
        return np.array([estimate_prefill_latency(m, self.hardware_, self.prompt_len, self._toggles) for m in X])

    def report(self, model) -> PerfReport:
        check_is_fitted(self, "hardware_")
        return perf_report(model, self.hardware_, self.seq_len, self.prompt_len, self._toggles)
