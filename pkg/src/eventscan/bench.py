"""Wall-clock benchmark of the serial and chunked parallel engines."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .engine import layer_forward, plan_chunks, route_spikes
from .lif import LifParams
from .network import LayerParams, Network, forward, gradients
from .readout import ReadoutParams
from .scan import DepthCounter
from .solver import SolverConfig

BENCH_COLUMNS = ("hidden", "batch", "chunk", "mode", "mean_s", "std_s", "speedup")


def dense_input(rng: np.random.Generator, batch: int, n_inputs: int, spikes_per_input: int, duration: float):
    """Poisson-like input: each channel fires ``spikes_per_input`` times in
    [0, duration], so every neuron receives n_inputs * spikes_per_input
    events."""
    x = np.sort(rng.uniform(0.0, duration, (batch, n_inputs, spikes_per_input)), axis=-1)
    return x


def bench_network(n_inputs: int, hidden: int, chunk: int, engine: str, seed: int = 0, s_max: int = 6) -> Network:
    """One hidden layer with weak, balanced weights so that neurons spike
    sparsely and have to integrate the whole input stream."""
    rng = np.random.default_rng(seed)
    lif = LifParams(0.02, 0.005)
    w_in = rng.normal(0.0, 0.05, (hidden, n_inputs))
    w_out = rng.normal(0.0, 0.5, (3, hidden))
    readout = ReadoutParams(0.1, 0.2, 1.0, 3)
    return Network([LayerParams(w_in), LayerParams(w_out)], lif, readout, (s_max,), chunk_size=chunk, engine=engine)


def time_batches(net: Network, inputs: list, labels: list, warmup: int) -> np.ndarray:
    """Per-batch wall time of forward + backward, after ``warmup`` batches
    that are run but not recorded."""
    times = []
    for k, (x, y) in enumerate(zip(inputs, labels)):
        t0 = time.perf_counter()
        res = forward(net, x, y, record=True)
        gradients(net, res)
        dt = time.perf_counter() - t0
        if k >= warmup:
            times.append(dt)
    return np.asarray(times)


@dataclass
class BenchPoint:
    hidden: int
    batch: int
    chunk: int
    mode: str
    mean_s: float
    std_s: float
    speedup: float = float("nan")

    def row(self) -> dict:
        return {c: getattr(self, c) for c in BENCH_COLUMNS}


def run_bench(
    hidden=(128, 256),
    batch=(32, 64),
    chunk=(128,),
    modes=("serial", "parallel"),
    n_inputs: int = 16,
    spikes_per_input: int = 125,
    duration: float = 0.2,
    warmup: int = 5,
    batches: int = 100,
    seed: int = 0,
    log=None,
) -> list:
    """Time every (hidden, batch, chunk, mode) point on shared inputs.

    Speedup is serial time over parallel time at the same (hidden, batch);
    the serial engine does not depend on the chunk size so it is timed once
    per (hidden, batch).
    """
    rng = np.random.default_rng(seed)
    points = []
    for h in hidden:
        for b in batch:
            inputs = [dense_input(rng, b, n_inputs, spikes_per_input, duration) for _ in range(warmup + batches)]
            labels = [rng.integers(0, 3, b) for _ in inputs]
            serial = None
            if "serial" in modes:
                t = time_batches(bench_network(n_inputs, h, max(chunk), "serial", seed), inputs, labels, warmup)
                serial = BenchPoint(h, b, 0, "serial", float(t.mean()), float(t.std(ddof=1)) if t.size > 1 else 0.0, 1.0)
                points.append(serial)
                if log:
                    log(serial)
            if "parallel" in modes:
                for k in chunk:
                    t = time_batches(bench_network(n_inputs, h, k, "parallel", seed), inputs, labels, warmup)
                    pt = BenchPoint(h, b, k, "parallel", float(t.mean()), float(t.std(ddof=1)) if t.size > 1 else 0.0)
                    if serial is not None:
                        pt.speedup = serial.mean_s / pt.mean_s
                    points.append(pt)
                    if log:
                        log(pt)
    return points


def write_csv(path, points: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for p in points:
            w.writerow(p.row())


def serial_scaling(counts=(250, 500, 1000, 1500, 2000), hidden: int = 64, batch: int = 8, n_inputs: int = 16,
                   repeats: int = 5, seed: int = 0) -> dict:
    """Serial forward+backward time against input spikes per neuron, with a
    least-squares line and its R^2."""
    rng = np.random.default_rng(seed)
    net = bench_network(n_inputs, hidden, 128, "serial", seed)
    per_count = []
    for n in counts:
        spi = max(n // n_inputs, 1)
        xs = [dense_input(rng, batch, n_inputs, spi, 0.2) for _ in range(repeats + 1)]
        ys = [rng.integers(0, 3, batch) for _ in xs]
        per_count.append(float(np.median(time_batches(net, xs, ys, 1))))
    n_events = np.array([max(n // n_inputs, 1) * n_inputs for n in counts], float)
    t = np.array(per_count)
    slope, intercept = np.polyfit(n_events, t, 1)
    pred = slope * n_events + intercept
    r2 = 1.0 - ((t - pred) ** 2).sum() / ((t - t.mean()) ** 2).sum()
    return {"events": n_events.tolist(), "seconds": per_count, "slope": float(slope), "intercept": float(intercept), "r2": float(r2)}


def depth_check(n_events: int = 2000, k: int = 128, hidden: int = 32, s_max: int = 6, seed: int = 0) -> dict:
    """Instrumented combine rounds of one layer pass against C * ceil(log2 K)."""
    rng = np.random.default_rng(seed)
    lif = LifParams(0.02, 0.005)
    x = dense_input(rng, 2, 16, max(n_events // 16, 1), 0.2)
    w = rng.normal(0.05, 0.2, (hidden, 16))
    q = route_spikes(x, w)
    plan = plan_chunks(int(q.counts.max()), k, [s_max], [hidden])
    counter = DepthCounter()
    res = layer_forward(q, lif, plan, SolverConfig(), 0, "sklansky", counter)
    c = plan.num_chunks[0]
    bound = c * int(np.ceil(np.log2(k)))
    return {
        "rounds": counter.rounds,
        "chunks_budget": c,
        "chunk_passes": res.metrics.chunk_passes,
        "bound": bound,
        "output_spikes": int(res.metrics.output_spikes.sum()),
    }
