"""Efficiency accounting: parameter count, memory footprint, forward speed."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import networks
from .tensor import Tensor

BYTES_PER_PARAM = 4


@dataclass
class BenchRow:
    resolution: int
    ms_per_forward: float
    fps: float
    activation_mb: float


@dataclass
class BenchReport:
    param_count: int
    weight_memory_mb: float
    rows: list

    def csv_lines(self):
        lines = ["resolution,ms_per_forward,fps,activation_mb,param_count,weight_memory_mb"]
        for r in self.rows:
            lines.append(f"{r.resolution},{r.ms_per_forward:.6f},{r.fps:.3f},"
                         f"{r.activation_mb:.6f},{self.param_count},{self.weight_memory_mb:.6f}")
        return lines


def weight_memory_mb(n_params):
    return n_params * BYTES_PER_PARAM / 2 ** 20


def activation_memory_mb(spec, resolution):
    """Analytic peak activation footprint under sequential execution.

    Tracks the largest simultaneous set of live activations (layer input +
    output, plus any held stream feature) for a batch-1 forward.
    """
    def run(layers, h, w, c, held=0):
        peak = 0
        for layer in layers:
            if layer.op == "pool":
                oh, ow, oc = (h + 1) // 2, (w + 1) // 2, c
            elif layer.op == "deconv":
                oh, ow, oc = 2 * h, 2 * w, layer.out_ch
            else:
                oh, ow, oc = h, w, layer.out_ch
            live = c * h * w + oc * oh * ow + held
            peak = max(peak, live)
            h, w, c = oh, ow, oc
        return peak, (h, w, c)

    r = resolution
    if spec.kind == "spatiotemporal":
        p1, (h, w, cs) = run(spec.stream_s, r, r, 3)
        fs = cs * h * w
        p2, (_, _, ct) = run(spec.stream_t, r, r, 6, held=fs)
        ft = ct * h * w
        p3, _ = run(spec.head, h, w, cs + ct)
        peak = max(p1, p2, fs + ft + p3)
    else:
        cin = 3 if spec.kind == "spatial" else 6
        peak, _ = run(spec.all_layers(), r, r, cin)
    return peak * BYTES_PER_PARAM / 2 ** 20


def time_forward(spec, weights, resolution, iters=500, warmup=50, rng=None):
    """Median wall-clock per single-pair forward, in milliseconds."""
    rng = rng or np.random.default_rng(0)
    if spec.kind == "spatiotemporal":
        inputs = (Tensor(rng.random((1, 3, resolution, resolution)).astype(np.float32)),
                  Tensor(rng.random((1, 6, resolution, resolution)).astype(np.float32)))
    else:
        cin = 3 if spec.kind == "spatial" else 6
        inputs = (Tensor(rng.random((1, cin, resolution, resolution)).astype(np.float32)),)
    for _ in range(warmup):
        networks.forward(spec, weights, *inputs)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        networks.forward(spec, weights, *inputs)
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1000.0)


def run_bench(spec, weights, res_list=(32, 64, 128, 256), iters=500, warmup=50):
    n = networks.param_count(spec)
    rows = []
    for res in res_list:
        ms = time_forward(spec, weights, res, iters=iters, warmup=warmup)
        rows.append(BenchRow(resolution=res, ms_per_forward=ms, fps=1000.0 / ms,
                             activation_mb=activation_memory_mb(spec, res)))
    return BenchReport(param_count=n, weight_memory_mb=weight_memory_mb(n), rows=rows)
