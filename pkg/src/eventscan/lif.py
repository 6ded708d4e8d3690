"""Closed-form current-based LIF dynamics.

Between input events a neuron follows

    tau_m dV/dt = -V + I,        tau_s dI/dt = -I,

whose solution from (V0, I0) is

    I(t) = I0 exp(-t/tau_s)
    V(t) = V0 exp(-t/tau_m) + I0 kappa(t),
    kappa(t) = tau_s / (tau_m - tau_s) * (exp(-t/tau_m) - exp(-t/tau_s)).

All functions broadcast over numpy arrays, so the same code serves single
neurons and whole (batch, neuron) blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LifParams:
    """Time constants, threshold and reset of a LIF population.

    ``dtype`` selects the float mode used by the event engine ("float64" or
    "float32").
    """

    tau_m: float = 0.02
    tau_s: float = 0.005
    v_th: float = 1.0
    v_reset: float = 0.0
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if not (self.tau_m > 0 and self.tau_s > 0):
            raise ValueError("time constants must be positive")
        if self.tau_m == self.tau_s:
            raise ValueError("tau_m == tau_s is a degenerate case")
        if not self.v_th > self.v_reset:
            raise ValueError("v_th must exceed v_reset")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def coupling(self) -> float:
        """tau_s / (tau_m - tau_s), the gain of the current onto the voltage."""
        return self.tau_s / (self.tau_m - self.tau_s)

    @property
    def peak_scale(self) -> float:
        return self.tau_m * self.tau_s / (self.tau_m - self.tau_s)

    def with_dtype(self, dtype: str) -> "LifParams":
        return LifParams(self.tau_m, self.tau_s, self.v_th, self.v_reset, dtype)

    def cast(self, x):
        return np.asarray(x, dtype=self.np_dtype)


@dataclass(frozen=True)
class NeuronState:
    """Membrane potential ``v`` and synaptic current ``i`` (scalars or arrays)."""

    v: np.ndarray | float
    i: np.ndarray | float

    def check_finite(self) -> "NeuronState":
        if not (np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.i))):
            raise ValueError("neuron state must be finite")
        return self

    def as_tuple(self) -> tuple:
        return self.v, self.i


def _scalarize(x):
    x = np.asarray(x)
    return x.item() if x.ndim == 0 else x


def exp_difference(t, p: LifParams):
    """exp(-t/tau_m) - exp(-t/tau_s) without cancellation at small t.

    The slower exponential is factored out so the remaining difference is an
    expm1, which keeps full relative precision (this matters in float32).
    """
    t = np.asarray(t)
    ps = p.peak_scale
    slow = max(p.tau_m, p.tau_s)
    sign = 1.0 if ps > 0 else -1.0
    return sign * np.exp(-t / slow) * -np.expm1(-t / abs(ps))


def kernel(t, p: LifParams):
    """Voltage response kappa(t) to a unit current injected at time 0."""
    return p.coupling * exp_difference(t, p)


def kernel_derivative(t, p: LifParams):
    t = np.asarray(t)
    return p.coupling * (np.exp(-t / p.tau_s) / p.tau_s - np.exp(-t / p.tau_m) / p.tau_m)


def voltage(v0, i0, t, p: LifParams):
    """V(t) of the free flow started at (v0, i0)."""
    t = np.asarray(t)
    return v0 * np.exp(-t / p.tau_m) + i0 * kernel(t, p)


def current(i0, t, p: LifParams):
    return i0 * np.exp(-np.asarray(t) / p.tau_s)


def voltage_derivative(v0, i0, t, p: LifParams):
    """dV/dt of the free flow, equal to (I(t) - V(t)) / tau_m."""
    return (current(i0, t, p) - voltage(v0, i0, t, p)) / p.tau_m


def evolve(state: NeuronState, dt, p: LifParams) -> NeuronState:
    """Advance ``state`` by ``dt`` seconds without input events."""
    state.check_finite()
    dt_arr = np.asarray(dt)
    if np.any(dt_arr < 0):
        raise ValueError("dt must be non-negative")
    v = voltage(state.v, state.i, dt_arr, p)
    i = current(state.i, dt_arr, p)
    return NeuronState(_scalarize(v), _scalarize(i))


def peak_time(v0, i0, p: LifParams):
    """Time of the interior voltage maximum, NaN where there is none.

    The maximum exists when the voltage is still rising (I0 > V0); its
    location solves dV/dt = 0 in closed form.
    """
    v0 = np.asarray(v0)
    i0 = np.asarray(i0)
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = i0 * p.tau_m / (v0 * (p.tau_m - p.tau_s) + i0 * p.tau_s)
        t = p.peak_scale * np.log(arg)
    ok = (i0 > v0) & (arg > 0) & np.isfinite(t) & (t >= 0)
    return np.where(ok, t, np.nan)


def time_of_vmax(state: NeuronState, p: LifParams):
    """Time of the future voltage maximum, or None if V is non-increasing.

    For array states the result is an array with NaN marking "no maximum".
    """
    state.check_finite()
    t = peak_time(state.v, state.i, p)
    if t.ndim == 0:
        return None if np.isnan(t) else float(t)
    return t


def spike_indicator(v0, i0, t_next, p: LifParams):
    """Vectorized threshold-crossing test on the interval [0, t_next].

    Returns ``(hit, t_peak)`` where ``t_peak`` is the peak time (NaN when
    absent) that brackets the crossing together with ``t_next``.
    """
    t_next = np.asarray(t_next)
    end_v = voltage(v0, i0, t_next, p)
    tp = peak_time(v0, i0, p)
    with np.errstate(invalid="ignore"):
        peak_inside = np.isfinite(tp) & (tp < t_next)
        peak_v = voltage(v0, i0, np.where(peak_inside, tp, 0.0), p)
        hit = (end_v >= p.v_th) | (peak_inside & (peak_v >= p.v_th))
    return hit, tp


def spike_in_interval(state: NeuronState, t_next, p: LifParams):
    """Whether the free flow from ``state`` reaches threshold within t_next."""
    state.check_finite()
    if np.any(np.asarray(t_next) <= 0):
        raise ValueError("t_next must be positive")
    hit, _ = spike_indicator(state.v, state.i, t_next, p)
    return _scalarize(hit)


def apply_spike(state: NeuronState, weight) -> NeuronState:
    """Inject an input event: the current jumps by ``weight``."""
    return NeuronState(state.v, _scalarize(np.asarray(state.i) + weight))


def interval_vmax(v0, i0, dt, p: LifParams):
    """Maximum of V over [0, dt] of the free flow and where it sits.

    Returns ``(vmax, where, t_eval)`` with ``where`` 0 for the start point,
    1 for an interior peak and 2 for the right endpoint.  V has at most one
    stationary point: a maximum when the flow starts rising, otherwise a
    minimum, in which case the larger endpoint wins.
    """
    dt = np.asarray(dt)
    tp = peak_time(v0, i0, p)
    has_peak = np.isfinite(tp)
    with np.errstate(invalid="ignore"):
        inside = has_peak & (tp < dt)
        end_higher = voltage(v0, i0, dt, p) > np.asarray(v0)
    at_end = (has_peak & ~inside) | (~has_peak & end_higher)
    t_eval = np.where(inside, tp, np.where(at_end, dt, 0.0))
    vmax = voltage(v0, i0, t_eval, p)
    where = np.where(inside, 1, np.where(at_end, 2, 0))
    return vmax, where, t_eval
