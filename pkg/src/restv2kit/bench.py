"""Wall-clock micro-benchmarks: throughput and a compute-density proxy.

Measured timings are hardware-specific and are reported, never asserted.
"""

from __future__ import annotations

import statistics
import time

import numpy as np

from .flops import window_style_flops
from .model import Model
from .tensor import ConfigError, Tensor


def bench_throughput(model: Model, geometry: int | tuple[int, int], batch: int = 1,
                     warmup_iters: int = 1, timed_iters: int = 3,
                     style: str | None = None, seed: int = 42) -> dict:
    """Median-of-runs forward timing; returns images/s and a FLOPs/s proxy."""
    if timed_iters < 1 or warmup_iters < 0:
        raise ConfigError("need timed_iters >= 1 and warmup_iters >= 0")
    if isinstance(geometry, int):
        geometry = (geometry, geometry)
    style = style or model.cfg.style
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((batch, 3, *geometry)).astype(np.float32))
    for _ in range(warmup_iters):
        model.forward(x, style=style)
    times = []
    for _ in range(timed_iters):
        t0 = time.perf_counter()
        model.forward(x, style=style)
        times.append(time.perf_counter() - t0)
    median = statistics.median(times)
    flops_per_image = window_style_flops(model.cfg, style, geometry).total
    return {
        "model": model.cfg.name,
        "style": style,
        "geometry": list(geometry),
        "batch": batch,
        "timed_iters": timed_iters,
        "median_seconds_per_iter": median,
        "images_per_second": batch / median,
        "flops_per_image": flops_per_image,
        "compute_density_flops_per_second": flops_per_image * batch / median,
        "all_times_seconds": times,
    }
