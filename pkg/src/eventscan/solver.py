"""Spike-time root solving and its implicit-function gradient.

The spike time t* is the first root of R(t) = V(t) - v_th inside a bracket
[0, t_peak] on which V rises monotonically.  V is concave there, so Newton's
method started at the bracket midpoint converges monotonically; bisection is
kept as a slower but assumption-free alternative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lif import LifParams, NeuronState, current, kernel, voltage

DEFAULT_ITERS = {"newton": 14, "bisection": 20}


@dataclass(frozen=True)
class SolverConfig:
    """Root solver choice; ``max_iters=None`` picks 14 (Newton) or 20 (bisection)."""

    method: str = "newton"
    max_iters: int | None = None
    deriv_floor: float = 0.01

    def __post_init__(self) -> None:
        if self.method not in DEFAULT_ITERS:
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.max_iters is None:
            object.__setattr__(self, "max_iters", DEFAULT_ITERS[self.method])
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.deriv_floor > 0:
            raise ValueError("deriv_floor must be positive")


@dataclass(frozen=True)
class SpikeSolution:
    """Relative spike time with the residual and slope found there."""

    t_star: np.ndarray | float
    residual: np.ndarray | float
    dR_dt: np.ndarray | float


def residual(state: NeuronState, t, p: LifParams):
    """(V(t) - v_th, dV/dt) of the free flow from ``state``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    return _residual(state.v, state.i, t, p)


def _residual(v0, i0, t, p: LifParams):
    v = voltage(v0, i0, t, p)
    return v - p.v_th, (current(i0, t, p) - v) / p.tau_m


def _pack(t, v0, i0, p):
    val, der = _residual(v0, i0, t, p)
    if np.ndim(t) == 0:
        return SpikeSolution(float(t), float(val), float(der))
    return SpikeSolution(t, val, der)


def newton_iterate(v0, i0, t_hi, p: LifParams, iters: int):
    """Clamped Newton iterations on [0, t_hi], vectorized and unchecked.

    Near the root, finite precision can leave the iterate alternating
    between two neighbouring floats, so the iterate with the smallest
    residual seen is returned rather than the last one.
    """
    t = 0.5 * t_hi
    zero = np.zeros_like(t)
    best_t = t
    best_r = np.full_like(t, np.inf)
    for _ in range(iters):
        val, der = _residual(v0, i0, t, p)
        better = np.abs(val) < best_r
        best_t = np.where(better, t, best_t)
        best_r = np.where(better, np.abs(val), best_r)
        safe = der != 0
        step = np.where(safe, val / np.where(safe, der, 1), zero)
        t = np.clip(t - step, zero, t_hi)
    val = _residual(v0, i0, t, p)[0]
    return np.where(np.abs(val) < best_r, t, best_t)


def bisection_iterate(v0, i0, t_hi, p: LifParams, iters: int):
    """Fixed-count bisection on [0, t_hi]; returns the final midpoint."""
    lo = np.zeros_like(t_hi)
    hi = t_hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        above = _residual(v0, i0, mid, p)[0] > 0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


def solve_unchecked(v0, i0, t_hi, cfg: SolverConfig, p: LifParams):
    """Spike times for certified brackets, with no precondition checks."""
    if cfg.method == "newton":
        return newton_iterate(v0, i0, t_hi, p, cfg.max_iters)
    return bisection_iterate(v0, i0, t_hi, p, cfg.max_iters)


def _prepare(state, t_vmax, p):
    state.check_finite()
    v0 = p.cast(state.v)
    i0 = p.cast(state.i)
    t_hi = p.cast(t_vmax)
    if np.any(~np.isfinite(t_hi)) or np.any(t_hi < 0):
        raise ValueError("bracket end must be finite and non-negative")
    return v0, i0, t_hi


def newton_solve(state: NeuronState, t_vmax, cfg: SolverConfig, p: LifParams) -> SpikeSolution:
    """Newton solve on [0, t_vmax]; the bracket must contain a crossing."""
    v0, i0, t_hi = _prepare(state, t_vmax, p)
    r_lo = _residual(v0, i0, np.zeros_like(t_hi), p)[0]
    r_hi = _residual(v0, i0, t_hi, p)[0]
    if np.any(r_lo > 0) or np.any(r_hi < 0):
        raise ValueError("no certified threshold crossing in the bracket")
    t = newton_iterate(v0, i0, t_hi, p, cfg.max_iters)
    return _pack(t, v0, i0, p)


def bisection_solve(state: NeuronState, t_vmax, cfg: SolverConfig, p: LifParams) -> SpikeSolution:
    """Bisection on [0, t_vmax]; requires R(0) < 0 <= R(t_vmax)."""
    v0, i0, t_hi = _prepare(state, t_vmax, p)
    r_lo = _residual(v0, i0, np.zeros_like(t_hi), p)[0]
    r_hi = _residual(v0, i0, t_hi, p)[0]
    if np.any(r_lo >= 0) or np.any(r_hi < 0):
        raise ValueError("invalid bisection bracket")
    t = bisection_iterate(v0, i0, t_hi, p, cfg.max_iters)
    return _pack(t, v0, i0, p)


def solve(state: NeuronState, t_vmax, cfg: SolverConfig, p: LifParams) -> SpikeSolution:
    if cfg.method == "newton":
        return newton_solve(state, t_vmax, cfg, p)
    return bisection_solve(state, t_vmax, cfg, p)


def floor_derivative(d, floor: float):
    """Sign-preserving clamp |d| >= floor (zero maps to +floor)."""
    d = np.asarray(d)
    sign = np.where(d < 0, -1.0, 1.0)
    return sign * np.maximum(np.abs(d), floor)


def spike_time_partials(t_star, p: LifParams, d_floored):
    """(dt/dV0, dt/dI0, dt/dv_th) by implicit differentiation of R(t*) = 0."""
    t_star = np.asarray(t_star)
    dv0 = -np.exp(-t_star / p.tau_m) / d_floored
    di0 = -kernel(t_star, p) / d_floored
    dth = 1.0 / d_floored
    return dv0, di0, dth


def spike_time_vjp(
    solution: SpikeSolution,
    state: NeuronState,
    p: LifParams,
    upstream,
    cfg: SolverConfig | None = None,
):
    """Pull ``upstream`` (dL/dt*) back to (V0, I0, v_th).

    The slope at the root is floored in magnitude before inversion so that
    grazing crossings cannot produce unbounded gradients.
    """
    floor = (cfg or SolverConfig()).deriv_floor
    d = floor_derivative(solution.dR_dt, floor)
    dv0, di0, dth = spike_time_partials(solution.t_star, p, d)
    upstream = np.asarray(upstream)
    out = tuple(upstream * g for g in (dv0, di0, dth))
    if all(np.ndim(g) == 0 for g in out):
        return tuple(float(g) for g in out)
    return out
