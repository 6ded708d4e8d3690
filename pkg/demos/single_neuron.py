"""One LIF neuron, three ways: closed form, affine scan, spike-time solver.

Run: python demos/single_neuron.py
"""

from __future__ import annotations

import numpy as np

from eventscan.lif import LifParams, NeuronState, evolve, peak_time, voltage
from eventscan.scan import map_for_step, scan
from eventscan.solver import SolverConfig, solve
from eventscan.verify import analytic_spike_time

p = LifParams(tau_m=0.02, tau_s=0.01)

# A kick of weight 5 from rest.  With tau_m = 2 tau_s the crossing is a quadratic root.
state = NeuronState(0.0, 5.0)
t_hi = peak_time(0.0, 5.0, p)
for method in ("newton", "bisection"):
    sol = solve(state, t_hi, SolverConfig(method), p)
    print(f"{method:9s} t* = {float(sol.t_star):.12f} s")
print(f"closed form t* = {float(analytic_spike_time(5.0)):.12f} s")

# Five input events.  Folding their affine maps with a prefix scan gives the
# state right after every event without stepping through them one by one.
times = np.array([0.001, 0.004, 0.0045, 0.010, 0.013])
weights = np.array([0.6, -0.2, 0.9, 0.4, 0.3])
gaps = np.diff(times, prepend=0.0)
prefix = scan(map_for_step(gaps, weights, p))
v_scan, i_scan = prefix.apply(0.0, 0.0)

s = NeuronState(0.0, 0.0)
for k, (dt, w) in enumerate(zip(gaps, weights)):
    s = evolve(s, dt, p)
    s = NeuronState(s.v, s.i + w)
    print(f"event {k}: V scan {v_scan[k]: .9f}  loop {float(s.v): .9f}")

t = np.linspace(0, 0.02, 5)
print("free decay of V from (0.5, 1.0):", np.round(voltage(0.5, 1.0, t, p), 6))
