"""Analytic FLOP totals and measured inference latency."""

import time
from dataclasses import dataclass

import numpy as np

from . import layers
from .model import network_forward, total_param_count


def network_flops(spec):
    per_layer = [layers.flop_count(s) for s in spec.layers]
    total = {k: sum(f[k] for f in per_layer) for k in ("xbar", "e", "y")}
    return per_layer, total


@dataclass
class Latency:
    median_us: float
    p95_us: float
    batch_1e4_ms: float
    iterations: int


def measure_latency(net, iterations=10_000, warmup=200, seed=0):
    """Per-sample latency of single-sample inference plus one 10^4-sample batch."""
    if iterations < 100:
        raise ValueError("iterations must be >= 100")
    rng = np.random.default_rng(seed)
    dtype = net.params[0]["B"].dtype
    d, t = net.spec.input_shape
    x = rng.standard_normal((1, d, t)).astype(dtype)
    for _ in range(warmup):
        network_forward(net, x)
    samples = np.empty(iterations)
    for i in range(iterations):
        t0 = time.perf_counter_ns()
        network_forward(net, x)
        samples[i] = time.perf_counter_ns() - t0
    batch = rng.standard_normal((10_000, d, t)).astype(dtype)
    network_forward(net, batch[:100])
    t0 = time.perf_counter_ns()
    network_forward(net, batch)
    batch_ns = time.perf_counter_ns() - t0
    return Latency(float(np.median(samples)) / 1e3, float(np.percentile(samples, 95)) / 1e3,
                   batch_ns / 1e6, iterations)


@dataclass
class BenchRow:
    row: str
    variant: str
    rank: int | None
    params: float
    flops: dict
    flops_total: float
    latency: Latency | None = None


def bench_rows(net, latency=None):
    per_layer, total = network_flops(net.spec)
    rows = [BenchRow(f"layer_{i + 1}", net.spec.variant, net.spec.rank, layers.param_count(s), f,
                     sum(f.values()))
            for i, (s, f) in enumerate(zip(net.spec.layers, per_layer))]
    rows.append(BenchRow("total", net.spec.variant, net.spec.rank, total_param_count(net.spec), total,
                         sum(total.values()), latency))
    return rows


def ratio_row(low, full):
    """Element-wise low-rank / full ratios of two ``total`` rows."""
    lat = None
    if low.latency is not None and full.latency is not None:
        lat = Latency(low.latency.median_us / full.latency.median_us,
                      low.latency.p95_us / full.latency.p95_us,
                      low.latency.batch_1e4_ms / full.latency.batch_1e4_ms,
                      low.latency.iterations)
    flops = {k: (low.flops[k] / full.flops[k] if full.flops[k] else float("nan")) for k in low.flops}
    return BenchRow("ratio", "lowrank/full", low.rank, low.params / full.params, flops,
                    low.flops_total / full.flops_total, lat)
