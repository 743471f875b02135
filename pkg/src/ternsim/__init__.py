"""Bit-accurate functional simulator and analytical performance model of a
ternary-weight LLM accelerator."""

__version__ = "0.1.0"

from .boothflex import PrecisionMode, booth_multiply, boothflex_matmul, bs_multiply  # noqa: E402
from .lop import LOPSelector, select_kv, surrogate_score, topk_bitwise  # noqa: E402
from .nonlinear import AbsmaxQuantizer, absmax_quantize, two_stage_softmax  # noqa: E402
from .perf import HardwareSpec, ModelSpec, PerformanceModel, PRESETS, Toggles  # noqa: E402
from .runtime import RunConfig, ToyModel, generate  # noqa: E402
from .tint import QTensor, TernaryLinear, matmul  # noqa: E402
from .trit_codec import TritTensor, pack_trits, unpack_trits  # noqa: E402

__all__ = [
    "AbsmaxQuantizer", "HardwareSpec", "LOPSelector", "ModelSpec", "PRESETS", "PerformanceModel",
    "PrecisionMode", "QTensor", "RunConfig", "TernaryLinear", "Toggles", "ToyModel", "TritTensor",
    "absmax_quantize", "booth_multiply", "boothflex_matmul", "bs_multiply", "generate", "matmul",
    "pack_trits", "select_kv", "surrogate_score", "topk_bitwise", "two_stage_softmax", "unpack_trits",
]
