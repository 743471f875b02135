"""Command-line front end.

Exit codes: 0 success, 1 usage or input error, 2 verification failure.
With ``--json`` results and errors are printed as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .boothflex import INT8_INT8, TERNARY_INT8, PrecisionMode, boothflex_matmul, booth_multiply, bs_multiply
from .exceptions import TernsimError
from .lop import exact_topk, lo_compress_array, select_kv
from .perf import (ABLATION_TOGGLES, DEFAULT_DECODE_CONTEXT, DEFAULT_PROMPT_LEN, Toggles, ablate, get_hardware,
                   get_model, perf_report, schedule_heads, DECODE)
from .runtime import RunConfig, ToyModel, generate
from .tint import QTensor, matmul as tint_matmul
from .trit_codec import TritTensor, format_trit_text, parse_trit_text, read_packed, write_packed

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=_jsonable))
    elif text is not None:
        print(text)
    if getattr(args, "out", None) and args.command in ("perf", "ablate", "infer"):
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# --- subcommands -----------------------------------------------------------

def cmd_pack(args) -> int:
    w = parse_trit_text(Path(args.input).read_text())
    write_packed(args.output, w)
    _emit(args, {"rows": w.rows, "cols": w.cols, "bytes": Path(args.output).stat().st_size},
          f"packed {w.rows}x{w.cols} trits into {args.output}")
    return EXIT_OK


def cmd_unpack(args) -> int:
    w = read_packed(args.input)
    Path(args.output).write_text(format_trit_text(w))
    _emit(args, {"rows": w.rows, "cols": w.cols}, f"unpacked {w.rows}x{w.cols} trits into {args.output}")
    return EXIT_OK


def _exhaustive(mode: str, width: int) -> tuple[int, int]:
    passed = total = 0
    if mode == "ternary":
        for w in (-1, 0, 1):
            for a in range(-128, 128):
                total += 1
                passed += booth_multiply(w, a, TERNARY_INT8) == w * a
        return passed, total
    if mode == "int8":
        xs = np.arange(-128, 128)
        for x in xs:
            for y in xs:
                total += 1
                passed += booth_multiply(int(x), int(y), INT8_INT8) == int(x) * int(y)
        return passed, total
    lo, hi = -(1 << (width - 1)), 1 << (width - 1)
    for x in range(lo, hi):
        for y in range(lo, hi):
            total += 1
            passed += bs_multiply(x, y, width, width) == x * y
    return passed, total


def cmd_matmul(args) -> int:
    rng = np.random.default_rng(args.seed)
    start = time.perf_counter()
    if args.exhaustive:
        passed, total = _exhaustive(args.mode, args.width)
    else:
        m, n, k = args.shape
        passed = total = 0
        for _ in range(args.trials):
            total += 1
            agree = True
            if args.mode == "int8":
                a, b = QTensor.random(m, k, rng), rng.integers(-128, 128, size=(n, k))
                got = boothflex_matmul(a, b, INT8_INT8)[0]
            elif args.mode == "bs":
                lim = 1 << (args.width - 1)
                a, b = rng.integers(-lim, lim, size=(m, k)), rng.integers(-128, 128, size=(n, k))
                got = boothflex_matmul(a, b, PrecisionMode.bit_serial(args.width))[0]
            else:
                a, b = QTensor.random(m, k, rng), TritTensor.random(n, k, rng)
                got = tint_matmul(a, b)
                # The Booth array in ternary mode must agree with the TINT core.
                agree = np.array_equal(boothflex_matmul(a, b, TERNARY_INT8)[0], got)
            a_arr = a.data if isinstance(a, QTensor) else a
            b_arr = b.data if isinstance(b, TritTensor) else b
            passed += agree and np.array_equal(got, a_arr.astype(np.int64) @ b_arr.astype(np.int64).T)
    seconds = time.perf_counter() - start
    ok = passed == total
    _emit(args, {"mode": args.mode, "passed": int(passed), "total": total, "seconds": seconds, "ok": ok},
          f"{args.mode}: {passed}/{total} pass ({seconds:.2f} s)")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_attn(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    for trial in range(args.trials):
        if args.pow2:
            sign = lambda shape: rng.choice([-1, 1], size=shape)
            q = sign(args.dim) * 2 ** rng.integers(0, 7, size=args.dim)
            keys = sign((args.seq_len, args.dim)) * 2 ** rng.integers(0, 7, size=(args.seq_len, args.dim))
        else:
            q = rng.integers(-127, 128, size=args.dim)
            keys = rng.integers(-127, 128, size=(args.seq_len, args.dim))
        chosen = select_kv(q, [lo_compress_array(r) for r in keys], args.k).indices
        exact = exact_topk(q, keys, args.k)
        recall = len(set(chosen.tolist()) & set(exact.tolist())) / len(exact)
        rows.append({"trial": trial, "seq_len": args.seq_len, "dim": args.dim, "k": args.k,
                     "pow2": args.pow2, "recall": recall})
    fields = ["trial", "seq_len", "dim", "k", "pow2", "recall"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        if not args.json or args.out:
            writer = csv.DictWriter(out, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    mean = float(np.mean([r["recall"] for r in rows])) if rows else float("nan")
    if args.json:
        print(json.dumps({"mean_recall": mean, "trials": len(rows)}))
    return EXIT_OK


def _parse_prompt(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"prompt must be integer token ids: {exc}") from None


def cmd_infer(args) -> int:
    spec = get_model(args.model)
    model = ToyModel.random(spec, seed=args.seed)
    cfg = RunConfig(lop_enabled=args.lop, k=args.k, seed=args.seed, max_new_tokens=args.max_new_tokens,
                    rope=args.rope, unified_max=args.unified_max)
    res = generate(model, _parse_prompt(args.prompt), cfg, get_hardware(args.hw))
    payload = {
        "tokens": res.tokens,
        "new_tokens": res.new_tokens,
        "ema": [asdict(c) for c in res.counters],
        "decode_cycles": [t.total_cycles for t in res.traces],
    }
    _emit(args, payload, " ".join(map(str, res.tokens)))
    return EXIT_OK


def _toggles(args) -> Toggles:
    return Toggles(lop=args.lop, lop_k=args.k)


def cmd_perf(args) -> int:
    hw = get_hardware(args.hw)
    report = perf_report(args.model, hw, args.seq_len, args.prompt_len, _toggles(args))
    if args.trace:
        Path(args.trace).write_text(schedule_heads(args.model, hw, DECODE, args.seq_len, _toggles(args)).to_csv())
    text = "\n".join(f"{k}: {v:.4g}" if isinstance(v, float) else f"{k}: {v}" for k, v in report.to_dict().items())
    _emit(args, report.to_dict(), text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    result = ablate(args.model, get_hardware(args.hw), ABLATION_TOGGLES, args.seq_len,
                    base=Toggles(lop_k=args.k))
    lines = ["toggle,phase,ratio"]
    for toggle, phases in result.items():
        for phase, ratio in phases.items():
            lines.append(f"{toggle},{phase},{ratio:.4f}")
    _emit(args, result, "\n".join(lines))
    return EXIT_OK


def run_selftest(seed: int = 0) -> dict[str, bool]:
    """Fast invariant suite; every entry must be True."""
    from .lop import surrogate_score, topk_bitwise, topk_sort_oracle
    from .nonlinear import two_stage_softmax
    from .reference import reference_generate
    from .trit_codec import UNPACK_LUT, pack_trits, unpack_trits, traffic_reduction
    from fractions import Fraction

    rng = np.random.default_rng(seed)
    checks = {}
    checks["booth_int8_exhaustive"] = _exhaustive("int8", 8) == (65536, 65536)
    checks["booth_ternary_padding"] = _exhaustive("ternary", 8) == (768, 768)
    checks["bs_8bit_exhaustive"] = _exhaustive("bs", 8) == (65536, 65536)
    trits = UNPACK_LUT.ravel()
    checks["codec_roundtrip"] = np.array_equal(unpack_trits(pack_trits(trits)), trits)
    checks["codec_traffic"] = traffic_reduction() == Fraction(1, 5)
    a, w = QTensor.random(33, 70, rng), TritTensor.random(21, 70, rng)
    checks["tint_matmul"] = np.array_equal(tint_matmul(a, w), a.data.astype(np.int64) @ w.data.astype(np.int64).T)
    x = rng.uniform(-20, 16, size=100)
    ref = np.exp(x - x.max()) / np.exp(x - x.max()).sum()
    checks["softmax"] = bool(np.allclose(two_stage_softmax(x), ref, rtol=1e-6, atol=0))
    s = rng.integers(-50, 50, size=200)
    checks["topk"] = np.array_equal(topk_bitwise(s, 16).indices, topk_sort_oracle(s, 16))
    q, k = rng.integers(-127, 128, size=16), rng.integers(-127, 128, size=16)
    exact = sum(int(np.sign(a) * np.sign(b)) << (int(abs(a)).bit_length() + int(abs(b)).bit_length() - 2)
                for a, b in zip(q, k) if a and b)
    checks["surrogate"] = surrogate_score(lo_compress_array(q), lo_compress_array(k)) == exact
    model = ToyModel.random(seed=seed)
    cfg = RunConfig(max_new_tokens=4, lop_enabled=True, k=4)
    checks["runtime_vs_reference"] = generate(model, [1, 2, 3], cfg).tokens == reference_generate(model, [1, 2, 3], cfg)
    return checks


def cmd_selftest(args) -> int:
    checks = run_selftest(args.seed)
    ok = all(checks.values())
    text = "\n".join(f"{'PASS' if v else 'FAIL'} {name}" for name, v in checks.items())
    _emit(args, {"ok": ok, "checks": checks}, text)
    return EXIT_OK if ok else EXIT_VERIFY


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output file")
    hw_opt = _Parser(add_help=False)
    hw_opt.add_argument("--hw", default="default", help="'default' or a JSON hardware file")
    k_opt = _Parser(add_help=False)
    k_opt.add_argument("--k", type=int, default=32, help="LOP top-k")

    p = _Parser(prog="ternsim", description="Ternary LLM accelerator simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pack", parents=[common], help="trit text file -> packed file")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_pack)

    s = sub.add_parser("unpack", parents=[common], help="packed file -> trit text file")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_unpack)

    s = sub.add_parser("matmul", parents=[common], help="verify a core against the integer oracle")
    s.add_argument("--mode", choices=("ternary", "int8", "bs"), default="ternary")
    s.add_argument("--width", type=int, choices=(4, 8, 12, 16), default=8, help="bit-serial width")
    s.add_argument("--shape", type=int, nargs=3, metavar=("M", "N", "K"), default=(16, 16, 64))
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--exhaustive", action="store_true")
    s.set_defaults(func=cmd_matmul)

    s = sub.add_parser("attn", parents=[common, k_opt], help="LOP recall study (CSV)")
    s.add_argument("--seq-len", type=int, default=256)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--pow2", action="store_true", help="draw Q/K entries from +-2^e")
    s.set_defaults(func=cmd_attn)

    s = sub.add_parser("infer", parents=[common, hw_opt, k_opt], help="toy-model greedy generation")
    s.add_argument("--model", default="toy", help="preset name or JSON model file")
    s.add_argument("--prompt", default="1 2 3 4")
    s.add_argument("--max-new-tokens", type=int, default=8)
    s.add_argument("--lop", action="store_true", help="enable LOP KV selection")
    s.add_argument("--rope", action="store_true")
    s.add_argument("--unified-max", type=float, default=16.0)
    s.set_defaults(func=cmd_infer)

    for name, func, help_ in (("perf", cmd_perf, "performance report"), ("ablate", cmd_ablate, "ablation ratios")):
        s = sub.add_parser(name, parents=[common, hw_opt, k_opt], help=help_)
        s.add_argument("--model", default="3b", help="preset name or JSON model file")
        s.add_argument("--seq-len", type=int, default=DEFAULT_DECODE_CONTEXT, help="decode context length")
        s.add_argument("--lop", action=argparse.BooleanOptionalAction, default=True)
        if name == "perf":
            s.add_argument("--prompt-len", type=int, default=DEFAULT_PROMPT_LEN)
            s.add_argument("--trace", help="write the decode trace as CSV")
        s.set_defaults(func=func)

    s = sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json" in argv
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        _report_error(as_json, "usage", str(exc))
        return EXIT_USAGE
    except (TernsimError, ValueError, OSError) as exc:
        _report_error(as_json, type(exc).__name__, str(exc))
        return EXIT_USAGE


def _report_error(as_json: bool, kind: str, message: str) -> None:
    if as_json:
        print(json.dumps({"error": kind, "message": message}))
    else:
        print(f"error: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
