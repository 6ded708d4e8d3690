"""Leaky-integrator readout: class logits from exponentially weighted voltage
integrals.

An output neuron integrates its input events like a LIF neuron but never
spikes.  Its logit is

    T * integral_0^tau_max exp(-t / tau_li) V(t) dt,

evaluated interval by interval in closed form.  With a_e the event times and
w_e their weights the integral is linear in the weights,

    logit = T * sum_e w_e G(a_e),

which gives cheap exact gradients through ``event_kernel``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import EventQueues
from .lif import LifParams, NeuronState
from .scan import scan_components, step_coefficients


@dataclass(frozen=True)
class ReadoutParams:
    tau_li: float = 0.01
    tau_max: float = 0.02
    temperature: float = 20.0
    n_cls: int = 3

    def __post_init__(self) -> None:
        if not (self.tau_li > 0 and self.tau_max > 0 and self.temperature > 0):
            raise ValueError("readout constants must be positive")
        if self.n_cls < 1:
            raise ValueError("n_cls must be >= 1")

    def blended(self, tau: float) -> float:
        """tau_li * tau / (tau_li + tau), the combined decay constant."""
        return self.tau_li * tau / (self.tau_li + tau)


def _one_minus_exp(x):
    return -np.expm1(-x)


def li_interval_integral(state: NeuronState, t_i, t_ip1, p: LifParams):
    """Integral of V over [t_i, t_ip1] for the free flow from ``state``."""
    dt = np.asarray(t_ip1) - np.asarray(t_i)
    if np.any(dt < 0):
        raise ValueError("interval end precedes its start")
    gamma = np.asarray(state.i) * p.coupling
    em = p.tau_m * _one_minus_exp(dt / p.tau_m)
    es = p.tau_s * _one_minus_exp(dt / p.tau_s)
    return np.asarray(state.v) * em + gamma * (em - es)


def weighted_li_interval_integral(state: NeuronState, t_i, t_ip1, p: LifParams, r: ReadoutParams):
    """Integral of exp(-t/tau_li) V(t) over [t_i, t_ip1]."""
    t_i = np.asarray(t_i)
    dt = np.asarray(t_ip1) - t_i
    if np.any(dt < 0) or np.any(t_i < 0):
        raise ValueError("expected 0 <= t_i <= t_ip1")
    return _weighted(np.asarray(state.v), np.asarray(state.i), t_i, dt, p, r)


def _weighted(v, i, t_i, dt, p, r):
    tm = r.blended(p.tau_m)
    ts = r.blended(p.tau_s)
    gamma = i * p.coupling
    body = (v + gamma) * tm * _one_minus_exp(dt / tm) - gamma * ts * _one_minus_exp(dt / ts)
    return np.exp(-t_i / r.tau_li) * body


def logits(queues: EventQueues, p: LifParams, r: ReadoutParams, scan_method: str = "sklansky"):
    """Class logits (B, n_cls) by folding each class neuron's events.

    Interval start states come from a prefix scan over the event maps; each
    interval is clipped to [0, tau_max] and integrated in closed form.
    """
    b, c, e = queues.shape
    times = np.broadcast_to(queues.times, (b, c, e))
    a = np.minimum(times, r.tau_max)
    w = np.where(times < r.tau_max, queues.weights, 0.0)
    prev = np.concatenate([np.zeros((b, c, 1)), a[..., :-1]], axis=-1)
    gap = a - prev
    cm, m01, cs = step_coefficients(gap, p)
    comps = scan_components([cm, m01, cs, np.zeros_like(w), w], scan_method)
    v_post, i_post = comps[3], comps[4]
    v_start = np.concatenate([np.zeros((b, c, 1)), v_post], axis=-1)
    i_start = np.concatenate([np.zeros((b, c, 1)), i_post], axis=-1)
    starts = np.concatenate([np.zeros((b, c, 1)), a], axis=-1)
    ends = np.concatenate([a, np.full((b, c, 1), r.tau_max)], axis=-1)
    total = _weighted(v_start, i_start, starts, ends - starts, p, r).sum(-1)
    return r.temperature * total


def event_kernel(a, p: LifParams, r: ReadoutParams):
    """G(a) and G'(a): weighted integral of the response to a unit event at a.

    Events at or after tau_max contribute nothing.
    """
    a = np.asarray(a)
    inside = a < r.tau_max
    a_c = np.where(inside, a, 0.0)
    g = np.zeros_like(a_c)
    dg = np.zeros_like(a_c)
    for tau, sign in ((p.tau_m, 1.0), (p.tau_s, -1.0)):
        tb = r.blended(tau)
        head = np.exp(-a_c / r.tau_li)
        tail = np.exp(-(r.tau_max - a_c) / tau - r.tau_max / r.tau_li)
        g += sign * tb * (head - tail)
        dg += sign * tb * (-head / r.tau_li - tail / tau)
    g *= p.coupling
    dg *= p.coupling
    return np.where(inside, g, 0.0), np.where(inside, dg, 0.0)


def logits_vjp(queues: EventQueues, p: LifParams, r: ReadoutParams, g_logits):
    """Gradients of sum(g_logits * logits) w.r.t. event times and weights."""
    b, c, e = queues.shape
    times = np.broadcast_to(queues.times, (b, c, e))
    g, dg = event_kernel(times, p, r)
    up = r.temperature * np.asarray(g_logits)[..., None]
    return up * queues.weights * dg, up * g
