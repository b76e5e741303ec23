"""Per-layer inference microbenchmarks: wall time, FLOPs and time per MFLOP.

Timing is forward-only, single-threaded, on one image, with warmup runs
excluded.  Absolute milliseconds are machine-specific; the interesting
output is the ms-per-MFLOP column, which shows that a dense 1x1
convolution does far more work per unit time than a depthwise one.
"""

from __future__ import annotations

import csv
import io
import json
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import UsageError
from .shift import asl_forward, init_shift
from .tensor import LayerDesc, conv_pointwise, count_flops, depthwise_conv, get_num_threads

LAYER_KINDS = ("dwconv3x3", "conv1x1", "bn_affine", "relu", "eltwise_sum", "asl")
TABLE1_KINDS = LAYER_KINDS
COLUMNS = ("name", "time_ms_median", "time_ms_mean", "flops", "ms_per_mflop")
FORMATS = ("text", "csv", "json")

REPORT_SCHEMA = {
    "type": "object",
    "required": ["environment", "records"],
    "properties": {
        "environment": {
            "type": "object",
            "required": ["threads", "precision"],
            "properties": {"threads": {"type": "integer", "const": 1}, "precision": {"type": "string"}},
        },
        "records": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": list(COLUMNS) + ["input_shape", "repetitions", "warmup", "coarse_timer"],
                "properties": {
                    "name": {"type": "string"},
                    "time_ms_median": {"type": "number", "minimum": 0},
                    "time_ms_mean": {"type": "number", "minimum": 0},
                    "flops": {"type": "integer", "minimum": 0},
                    "ms_per_mflop": {"type": "number", "minimum": 0},
                    "input_shape": {"type": "array", "items": {"type": "integer"}},
                    "repetitions": {"type": "integer", "minimum": 1},
                    "warmup": {"type": "integer", "minimum": 0},
                    "coarse_timer": {"type": "boolean"},
                },
            },
        },
    },
}


@dataclass
class BenchRecord:
    name: str
    time_ms_median: float
    time_ms_mean: float
    flops: int
    ms_per_mflop: float
    input_shape: list = field(default_factory=list)
    repetitions: int = 100
    warmup: int = 10
    coarse_timer: bool = False


def _make_layer(kind, channels, out_channels, height, width, dtype, rng):
    """Return (forward thunk, LayerDesc) for one benchmarked layer kind.

    Outputs go to a preallocated buffer where the kernel allows it, so the
    timings measure compute rather than the allocator.
    """
    x = rng.standard_normal((1, channels, height, width)).astype(dtype)
    buf = np.empty_like(x)
    if kind == "conv1x1":
        w = rng.standard_normal((out_channels, channels)).astype(dtype)
        out = np.empty((1, out_channels, height, width), dtype=dtype)
        return (lambda: conv_pointwise(x, w, out=out)), LayerDesc("conv", channels, out_channels, 1, height, width)
    if kind == "dwconv3x3":
        w = rng.standard_normal((channels, 9)).astype(dtype)
        return (lambda: depthwise_conv(x, w, out=buf)), LayerDesc("depthwise", channels, channels, 9, height, width)
    if kind == "bn_affine":
        # inference-time BN folded with its scale/bias into one per-channel affine
        scale = rng.uniform(0.5, 1.5, (channels, 1, 1)).astype(dtype)
        shift = rng.standard_normal((channels, 1, 1)).astype(dtype)

        def affine():
            np.multiply(x, scale, out=buf)
            return np.add(buf, shift, out=buf)

        return affine, LayerDesc("elementwise", channels, channels, 1, height, width)
    if kind == "relu":
        return (lambda: np.maximum(x, 0, out=buf)), LayerDesc("elementwise", channels, channels, 1, height, width)
    if kind == "eltwise_sum":
        x2 = rng.standard_normal(x.shape).astype(dtype)
        return (lambda: np.add(x, x2, out=buf)), LayerDesc("elementwise", channels, channels, 1, height, width)
    if kind == "asl":
        theta = init_shift("uniform", channels, int(rng.integers(2**31))).values
        return (lambda: asl_forward(x, theta)[0]), LayerDesc("asl", channels, channels, 1, height, width)
    raise UsageError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")


def bench_layer(kind, channels=64, height=224, width=224, out_channels=None,
                repetitions=100, warmup=10, dtype=np.float32, seed=0) -> BenchRecord:
    """Time ``repetitions`` forward passes of one layer after ``warmup`` untimed ones."""
    if get_num_threads() != 1:
        raise RuntimeError("benchmarks require single-threaded mode (set_num_threads(1))")
    if repetitions < 1 or warmup < 0:
        raise UsageError("repetitions must be >= 1 and warmup >= 0")
    out_channels = out_channels or channels
    rng = np.random.default_rng(seed)
    fn, desc = _make_layer(kind, channels, out_channels, height, width, np.dtype(dtype), rng)
    times = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            fn()
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
    median = statistics.median(times) * 1e3
    mean = statistics.fmean(times) * 1e3
    flops = count_flops(desc)
    resolution = time.get_clock_info("perf_counter").resolution
    return BenchRecord(
        name=kind,
        time_ms_median=median,
        time_ms_mean=mean,
        flops=flops,
        ms_per_mflop=median / (flops / 1e6),
        input_shape=[1, channels, height, width],
        repetitions=repetitions,
        warmup=warmup,
        coarse_timer=median * 1e-3 < 100 * resolution,
    )


def run_table1(repetitions=100, warmup=10, kinds=TABLE1_KINDS, dtype=np.float32, seed=0):
    """The 224x224, 64-channel configuration for every benchmarked layer."""
    return [bench_layer(k, 64, 224, 224, 64, repetitions, warmup, dtype, seed) for k in kinds]


def environment(dtype=np.float32):
    return {
        "threads": get_num_threads(),
        "precision": np.dtype(dtype).name,
        "numpy": np.__version__,
        "machine": platform.machine(),
        "python": platform.python_version(),
    }


def emit_report(records, fmt="text", env=None) -> str:
    if not records:
        raise UsageError("no benchmark records to report")
    if fmt not in FORMATS:
        raise UsageError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    env = env or environment()
    if fmt == "json":
        return json.dumps({"environment": env, "records": [asdict(r) for r in records]}, indent=2)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in records:
            writer.writerow([r.name, f"{r.time_ms_median:.6f}", f"{r.time_ms_mean:.6f}", r.flops, f"{r.ms_per_mflop:.6f}"])
        return buf.getvalue()
    lines = [f"# threads={env['threads']} precision={env['precision']}"]
    lines.append(f"{'name':<12} {'median ms':>10} {'mean ms':>10} {'FLOPs':>12} {'ms/MFLOP':>10}")
    for r in records:
        flag = "  (coarse timer)" if r.coarse_timer else ""
        lines.append(
            f"{r.name:<12} {r.time_ms_median:>10.3f} {r.time_ms_mean:>10.3f} {r.flops:>12,d} {r.ms_per_mflop:>10.4f}{flag}"
        )
    return "\n".join(lines) + "\n"
