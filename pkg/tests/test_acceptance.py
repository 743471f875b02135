"""Exit criteria.  The terminal summary prints one PASS/FAIL line per label."""

import itertools
import time
from fractions import Fraction

import numpy as np
import pytest

from ternsim.boothflex import INT8_INT8, TERNARY_INT8, PrecisionMode, booth_multiply, boothflex_matmul, bs_multiply
from ternsim.lop import lo_compress_array, surrogate_score, topk_bitwise, topk_recall, topk_sort_oracle
from ternsim.nonlinear import QuantParams, fused_output, two_stage_softmax, unfused_output
from ternsim.perf import (
    PerformanceModel, ablate, bandwidth_profile, estimate_decode_throughput, estimate_prefill_latency,
)
from ternsim.reference import reference_generate
from ternsim.runtime import RunConfig, ToyModel, generate
from ternsim.tint import PEArray, QTensor, matmul, sel, tile_matmul_os
from ternsim.trit_codec import (
    N_PACKED_CODES, Packing, TritTensor, UNPACK_LUT, pack_trits, traffic_ratio, traffic_reduction, unpack_byte,
    unpack_trits,
)

DECODE_TARGETS = {"2b": 99.21, "3b": 70.70, "7b": 36.46, "13b": 18.62}
PREFILL_3B = 0.88
PEAK_READ_3B = 63.0
DRAM_LIMIT = 76.8


@pytest.fixture(scope="module")
def calibrated():
    """Single calibration of the core count against the 3B decode figure."""
    return PerformanceModel().fit(["3b"], [DECODE_TARGETS["3b"]])


# --- AC1 -----------------------------------------------------------------

@pytest.mark.acceptance("AC1")
def test_booth_int8_exhaustive():
    start = time.perf_counter()
    failures = sum(booth_multiply(x, y, INT8_INT8) != x * y
                   for x, y in itertools.product(range(-128, 128), repeat=2))
    elapsed = time.perf_counter() - start
    assert failures == 0
    assert elapsed < 10.0


# --- AC2 -----------------------------------------------------------------

@pytest.mark.acceptance("AC2")
def test_ternary_padding_exhaustive():
    pairs = list(itertools.product((-1, 0, 1), range(-128, 128)))
    assert len(pairs) == 768
    assert all(booth_multiply(w, a, TERNARY_INT8) == sel(w, a) for w, a in pairs)


# --- AC3 -----------------------------------------------------------------

@pytest.mark.acceptance("AC3")
def test_codec_all_codes_roundtrip():
    for b in range(N_PACKED_CODES):
        assert pack_trits(unpack_byte(b)).data == bytes([b])
    trits = UNPACK_LUT.ravel()
    assert np.array_equal(unpack_trits(pack_trits(trits)), trits)


@pytest.mark.acceptance("AC3")
def test_codec_density_and_reduction():
    assert traffic_ratio(Packing.FIVE_TRIT_BYTE) == Fraction(8, 5)
    assert traffic_reduction(Packing.FIVE_TRIT_BYTE, Packing.TWO_BIT) == Fraction(1, 5)


# --- AC4 -----------------------------------------------------------------

@pytest.mark.acceptance("AC4")
@pytest.mark.parametrize("width", [4, 8])
def test_bit_serial_exhaustive(width):
    r = range(-(1 << (width - 1)), 1 << (width - 1))
    assert all(bs_multiply(x, y, width, width) == x * y for x, y in itertools.product(r, repeat=2))


@pytest.mark.acceptance("AC4")
@pytest.mark.parametrize("width", [12, 16])
def test_bit_serial_random(width):
    rng = np.random.default_rng(width)
    lim = 1 << (width - 1)
    xs = rng.integers(-lim, lim, size=100_000)
    ys = rng.integers(-lim, lim, size=100_000)
    assert all(bs_multiply(int(x), int(y), width, width) == int(x) * int(y) for x, y in zip(xs, ys))


@pytest.mark.acceptance("AC4")
def test_bit_serial_int8_cycles_double_ternary():
    assert PrecisionMode.bit_serial(8).iterations == 2 * TERNARY_INT8.iterations
    rng = np.random.default_rng(0)
    a = rng.integers(-128, 128, size=(16, 64))
    w = rng.integers(-1, 2, size=(24, 64))
    _, bs = boothflex_matmul(a, w, PrecisionMode.bit_serial(8))
    _, tern = boothflex_matmul(a, TritTensor(w), TERNARY_INT8)
    assert bs == 2 * tern


# --- AC5 -----------------------------------------------------------------

@pytest.mark.acceptance("AC5")
def test_tint_random_instances():
    rng = np.random.default_rng(5)
    shapes = [(256, 256, 256)] + [tuple(rng.integers(1, 257, size=3)) for _ in range(99)]
    for m, n, k in shapes:
        a = QTensor.random(int(m), int(k), rng)
        w = TritTensor.random(int(n), int(k), rng)
        assert np.array_equal(matmul(a, w), a.data.astype(np.int64) @ w.data.astype(np.int64).T)


@pytest.mark.acceptance("AC5")
def test_tint_no_psum_traffic_mid_tile():
    rng = np.random.default_rng(6)
    state = PEArray()
    a = rng.integers(-128, 128, size=(8, 256))
    w = rng.integers(-1, 2, size=(8, 256))
    for k0 in range(0, 256, 32):
        tile_matmul_os(a[:, k0:k0 + 32], w[:, k0:k0 + 32], state)
        assert state.counter.psum_reads == 0 and state.counter.psum_writes == 0
    out = state.drain()
    assert state.counter.psum_writes == 64
    assert np.array_equal(out, a @ w.T)


# --- AC6 -----------------------------------------------------------------

@pytest.mark.acceptance("AC6")
def test_softmax_matches_reference():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        n = int(rng.integers(1, 65))
        x = rng.uniform(-20.0, 16.0, size=n)
        out = two_stage_softmax(x, unified_max=16.0)
        e = np.exp(x - x.max())
        ref = e / e.sum()
        assert np.all(np.abs(out - ref) <= 1e-6 * ref)
        assert abs(out.sum() - 1.0) <= 1e-9


@pytest.mark.acceptance("AC6")
def test_fused_scaling_bit_identical():
    rng = np.random.default_rng(8)
    n = 100_000
    partial = rng.uniform(-1e4, 1e4, n)
    divisor = rng.uniform(1e-2, 1e4, n)
    absmax = np.abs(partial / divisor) * rng.uniform(1.0, 4.0, n) + 1e-12
    for p, d, m in zip(partial, divisor, absmax):
        q = QuantParams.from_absmax(float(m))
        assert fused_output(float(p), float(d), q) == unfused_output(float(p), float(d), q)


# --- AC7 -----------------------------------------------------------------

@pytest.mark.acceptance("AC7")
def test_topk_equals_sort_oracle():
    rng = np.random.default_rng(9)
    for i in range(10_000):
        n = int(rng.integers(1, 80))
        # Alternate narrow (tie-heavy) and wide ranges; both include negatives.
        span = 4 if i % 2 else 1 << 20
        scores = rng.integers(-span, span + 1, size=n)
        k = int(rng.integers(1, n + 1))
        assert set(topk_bitwise(scores, k).indices.tolist()) == set(topk_sort_oracle(scores, k).tolist())


@pytest.mark.acceptance("AC7")
def test_surrogate_equals_bruteforce():
    rng = np.random.default_rng(10)
    for _ in range(10_000):
        d = int(rng.integers(1, 33))
        q = rng.integers(-128, 128, size=d).tolist()
        k = rng.integers(-128, 128, size=d).tolist()
        brute = 0
        for a, b in zip(q, k):
            if a and b:
                mag = 2 ** (int(np.floor(np.log2(abs(a)))) + int(np.floor(np.log2(abs(b)))))
                brute += mag if np.sign(a) == np.sign(b) else -mag
        assert surrogate_score(lo_compress_array(q), lo_compress_array(k)) == brute


# --- AC8 -----------------------------------------------------------------

@pytest.mark.acceptance("AC8")
def test_pow2_recall_is_one():
    rng = np.random.default_rng(11)
    for _ in range(200):
        d, m = int(rng.integers(4, 65)), int(rng.integers(33, 513))
        q = rng.choice([-1, 1], d) * 2 ** rng.integers(0, 7, d)
        keys = rng.choice([-1, 1], (m, d)) * 2 ** rng.integers(0, 7, (m, d))
        assert topk_recall(q, keys, 32) == 1.0


# --- AC9 -----------------------------------------------------------------

@pytest.mark.acceptance("AC9")
def test_single_calibration(calibrated):
    assert calibrated.tint_core_count_ >= 1
    assert calibrated.predict(["3b"])[0] == pytest.approx(DECODE_TARGETS["3b"], rel=0.15)


@pytest.mark.acceptance("AC9")
@pytest.mark.parametrize("name", list(DECODE_TARGETS))
def test_decode_throughput(calibrated, name):
    assert calibrated.predict([name])[0] == pytest.approx(DECODE_TARGETS[name], rel=0.15)


@pytest.mark.acceptance("AC9")
def test_decode_pairwise_ratios(calibrated):
    names = list(DECODE_TARGETS)
    pred = dict(zip(names, calibrated.predict(names)))
    bad = []
    for a, b in itertools.combinations(names, 2):
        want = DECODE_TARGETS[a] / DECODE_TARGETS[b]
        got = pred[a] / pred[b]
        if abs(got / want - 1) > 0.10:
            bad.append(f"{a}/{b}: {got:.3f} vs {want:.3f}")
    assert not bad, "; ".join(bad)


@pytest.mark.acceptance("AC9")
def test_prefill_latency(calibrated):
    assert estimate_prefill_latency("3b", calibrated.hardware_, 64) == pytest.approx(PREFILL_3B, rel=0.15)


@pytest.mark.acceptance("AC9")
def test_decode_peak_read(calibrated):
    read, _ = bandwidth_profile("3b", calibrated.hardware_, "decode", 2048)
    assert read == pytest.approx(PEAK_READ_3B, rel=0.15)
    assert read <= DRAM_LIMIT


# --- AC10 ----------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation(calibrated):
    return ablate("3b", calibrated.hardware_, seq_len=2048)


@pytest.mark.acceptance("AC10")
def test_head_pipeline_improves_attention(ablation):
    assert ablation["head_pipeline"]["attention"] >= 1.5


@pytest.mark.acceptance("AC10")
def test_dual_core_improves_ffn(ablation):
    assert ablation["dual_core"]["ffn"] > 1.0


@pytest.mark.acceptance("AC10")
def test_lop_reduces_attention_ema(ablation, calibrated):
    assert ablation["lop"]["attention_ema_reduction"] >= 50
    on = estimate_decode_throughput("3b", calibrated.hardware_, 2048, lop_enabled=True)
    off = estimate_decode_throughput("3b", calibrated.hardware_, 2048, lop_enabled=False)
    assert on > off


# --- AC11 ----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    return ToyModel.random(seed=11)


@pytest.mark.acceptance("AC11")
def test_generation_deterministic(toy):
    cfg = RunConfig(lop_enabled=True, k=4, max_new_tokens=8)
    ra, rb = {}, {}
    a = generate(toy, [1, 2, 3, 4, 5, 6], cfg, record=ra)
    b = generate(toy, [1, 2, 3, 4, 5, 6], cfg, record=rb)
    assert a.tokens == b.tokens
    assert ra.keys() == rb.keys() and all(np.array_equal(ra[key], rb[key]) for key in ra)


@pytest.mark.acceptance("AC11")
@pytest.mark.parametrize("cfg", [RunConfig(max_new_tokens=8), RunConfig(lop_enabled=True, k=4, max_new_tokens=8)],
                         ids=["dense", "lop"])
def test_intermediates_match_reference(toy, cfg):
    mine, ref = {}, {}
    tokens = generate(toy, [9, 8, 7, 6, 5], cfg, record=mine).tokens
    assert tokens == reference_generate(toy, [9, 8, 7, 6, 5], cfg, record=ref)
    assert mine.keys() == ref.keys()
    for key in mine:
        assert np.array_equal(np.ravel(mine[key]), np.ravel(ref[key])), key


@pytest.mark.acceptance("AC11")
def test_dense_fallback_tokens(toy):
    prompt = [4, 2]
    off = generate(toy, prompt, RunConfig(max_new_tokens=10)).tokens
    on = generate(toy, prompt, RunConfig(lop_enabled=True, k=32, max_new_tokens=10)).tokens
    assert len(prompt) + 10 <= 32
    assert on == off
