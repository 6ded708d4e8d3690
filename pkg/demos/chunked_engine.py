"""Chunked parallel engine against the serial event loop on one layer.

Run: python demos/chunked_engine.py
"""

from __future__ import annotations

import time

import numpy as np

from eventscan.engine import layer_forward, plan_chunks, route_spikes, serial_forward
from eventscan.lif import LifParams
from eventscan.solver import SolverConfig

rng = np.random.default_rng(0)
p = LifParams(0.02, 0.005)
cfg = SolverConfig()

# 4 instances, 32 input channels with 20 spikes each, 64 neurons.
x = np.sort(rng.uniform(0.0, 0.1, (4, 32, 20)), axis=-1)
w = rng.normal(0.15, 0.4, (64, 32))
queues = route_spikes(x, w)
n_events = int(queues.counts.max())

t0 = time.perf_counter()
ref = serial_forward(queues, p, 6, cfg)
t_serial = time.perf_counter() - t0
print(f"serial: {int(ref.trace.n_spikes.sum())} output spikes in {t_serial:.3f} s")

for k in (8, 32, 128):
    t0 = time.perf_counter()
    out = layer_forward(queues, p, plan_chunks(n_events, k, [6], [64]), cfg)
    dt = time.perf_counter() - t0
    same = np.array_equal(out.trace.n_spikes, ref.trace.n_spikes)
    m = np.isfinite(ref.spike_times)
    diff = np.abs(out.spike_times[m] - ref.spike_times[m]).max(initial=0.0)
    met = out.metrics
    retained = met.consumed.sum() / met.processed.sum()
    print(f"K={k:3d}: counts equal {same}, max |dt| {diff:.1e} s, "
          f"work retained {retained:.3f}, combine rounds {met.combine_rounds}, {dt:.3f} s")
