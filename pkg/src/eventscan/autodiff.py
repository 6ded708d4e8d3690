"""Reverse-mode gradients through the event graph.

The tape records coarse event-graph operations (routing, a LIF layer pass,
the readout, the losses) together with the forward values their adjoints
need.  Each node has a hand-derived vector-Jacobian product.

LIF layer adjoint
-----------------
Number the gaps of a row's queue by slot k = 0..E: slot k starts at event
k-1 (slot 0 at t = 0 with a zero state) and ends at event k.  Writing S_k for
the state at the start of slot k, the forward pass is S_{k+1} = Phi_k(S_k)
plus the injected weight.  Without output spikes Phi_k is the free flow;
with spikes it is the flow interrupted by hard resets at times found by the
root solver, differentiated with the implicit-function rule.  Either way its
Jacobian J_k is upper triangular, so the adjoint recurrence

    G_k = J_k^T G_{k+1} + c_k

(c_k collects spike-time and V_max sensitivities local to slot k) is itself
an upper-triangular affine recurrence in (I, V) order and runs as a reverse
prefix scan with the same combine operator as the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .engine import EventQueues, LayerTrace
from .lif import LifParams, interval_vmax, kernel, kernel_derivative, voltage_derivative
from .scan import scan_components, step_coefficients
from .solver import SolverConfig, floor_derivative


def _rows(x, b, n):
    return np.ascontiguousarray(np.broadcast_to(x, (b, n) + x.shape[2:])).reshape((b * n,) + x.shape[2:])


def trace_intervals(trace: LayerTrace, p: LifParams):
    """Per-interval quantities of a layer pass, indexed by the event e that
    opens the interval.

    Returns a dict with ``vmax``, ``where``, ``t_eval``, ``gap``, ``valid``
    (interval opened by a consumed event) and ``spiked`` (an output spike was
    committed inside it), all shaped (B, N, E).
    """
    q = trace.queues
    b, n, e = q.shape
    a = np.broadcast_to(q.times, (b, n, e))
    nxt = np.concatenate([a[..., 1:], np.full((b, n, 1), np.inf)], axis=-1)
    with np.errstate(invalid="ignore"):
        gap = np.where(np.isfinite(a), nxt - a, 0.0)
    valid = np.arange(e) < trace.n_consumed[..., None]
    vmax, where, t_eval = interval_vmax(trace.post_v, trace.post_i, gap, p)
    spiked = np.zeros((b, n, e), bool)
    s = trace.spike_after.shape[-1]
    has = np.arange(s) < trace.n_spikes[..., None]
    bi, ni, si = np.nonzero(has & (trace.spike_after >= 0))
    spiked[bi, ni, trace.spike_after[bi, ni, si]] = True
    return {
        "vmax": np.where(valid, vmax, 0.0),
        "where": where,
        "t_eval": t_eval,
        "gap": gap,
        "valid": valid,
        "spiked": spiked & valid,
    }


BLOCK_ELEMENTS = 1 << 21


def lif_layer_vjp(
    trace: LayerTrace,
    p: LifParams,
    cfg: SolverConfig,
    g_spikes: np.ndarray,
    g_vmax: np.ndarray | None = None,
    scan_method: str = "sklansky",
    block_elements: int = BLOCK_ELEMENTS,
):
    """Pull gradients on output spike times (and interval V_max values) back
    to the arrival times and weights of the layer's input events.

    Returns ``(g_times, g_weights)`` shaped like the queue weights (B, N, E).
    Rows are independent, so large layers are processed in batch blocks of
    about ``block_elements`` queue entries to bound temporary memory.
    """
    b, n, e = trace.queues.shape
    step = max(1, block_elements // max(n * (e + 1), 1))
    if step >= b:
        return _lif_layer_vjp(trace, p, cfg, g_spikes, g_vmax, scan_method)
    g_t = np.empty((b, n, e))
    g_w = np.empty((b, n, e))
    for start in range(0, b, step):
        sl = slice(start, start + step)
        gv = None if g_vmax is None else g_vmax[sl]
        g_t[sl], g_w[sl] = _lif_layer_vjp(trace.batch_slice(sl), p, cfg, g_spikes[sl], gv, scan_method)
    return g_t, g_w


def _lif_layer_vjp(trace, p, cfg, g_spikes, g_vmax, scan_method):
    q = trace.queues
    b, n, e = q.shape
    r = b * n
    s = trace.spike_times.shape[-1]
    a = _rows(q.times, b, n).astype(float)
    w = q.weights.reshape(r, e).astype(float)
    nc = trace.n_consumed.reshape(r)
    V = trace.post_v.reshape(r, e).astype(float)
    I = trace.post_i.reshape(r, e).astype(float)
    t_sp = trace.spike_times.reshape(r, s).astype(float)
    after = trace.spike_after.reshape(r, s)
    nspk = trace.n_spikes.reshape(r)
    g_sp = np.asarray(g_spikes, float).reshape(r, s)
    zeros_col = np.zeros((r, 1))
    a_start = np.concatenate([zeros_col, a], axis=1)  # slot k starts at a_{k-1}
    a_end = np.concatenate([a, np.full((r, 1), np.inf)], axis=1)
    sv = np.concatenate([zeros_col, V], axis=1)
    si = np.concatenate([zeros_col, I], axis=1)
    slots = np.arange(e + 1)
    live = slots[None, :] < nc[:, None]
    with np.errstate(invalid="ignore"):
        span = np.where(live, a_end - a_start, 0.0)
    cm, j01, cs = step_coefficients(span, p)
    j00 = np.where(live, cm, 0.0)
    j01 = np.where(live, j01, 0.0)
    j11 = np.where(live, cs, 0.0)
    c_v = np.zeros((r, e + 1))
    c_i = np.zeros((r, e + 1))
    g_a = np.zeros((r, e))

    if g_vmax is not None:
        info = trace_intervals(trace, p)
        gm = np.where(info["valid"], np.asarray(g_vmax, float), 0.0).reshape(r, e)
        where = info["where"].reshape(r, e)
        t_ev = info["t_eval"].reshape(r, e)
        d_v = np.where(where == 0, 1.0, np.exp(-t_ev / p.tau_m))
        d_i = np.where(where == 0, 0.0, kernel(t_ev, p))
        c_v[:, 1:] += gm * d_v
        c_i[:, 1:] += gm * d_i
        at_end = where == 2
        slope = np.where(at_end, voltage_derivative(V, I, np.where(at_end, t_ev, 0.0), p), 0.0)
        g_a -= gm * slope
        g_a[:, 1:] += (gm * slope)[:, :-1]

    alpha = np.zeros(r)
    beta = np.zeros(r)
    prev_slot = np.full(r, -1)
    prev_t = np.zeros(r)
    rows = np.arange(r)
    for k_sp in range(s):
        m = k_sp < nspk
        if not m.any():
            break
        k = np.where(m, after[:, k_sp] + 1, 0)
        first = k != prev_slot
        a0 = a_start[rows, k]
        v0 = sv[rows, k]
        i0 = si[rows, k]
        t_r = np.where(m, t_sp[:, k_sp], a0)
        u_prev = np.where(first, 0.0, prev_t - a0)
        alpha_p = np.where(first, 0.0, alpha)
        beta_p = np.where(first, 0.0, beta)
        dec = np.exp(-u_prev / p.tau_s)
        i_r = i0 * dec
        v_r = np.where(first, v0, p.v_reset)
        di_dv = np.where(first, 0.0, -i_r / p.tau_s * alpha_p)
        di_di = np.where(first, 1.0, dec - i_r / p.tau_s * beta_p)
        dv_dv = np.where(first, 1.0, 0.0)
        rho = t_r - (a0 + u_prev)
        d = floor_derivative(voltage_derivative(v_r, i_r, rho, p), cfg.deriv_floor)
        em = np.exp(-rho / p.tau_m)
        kap = kernel(rho, p)
        alpha = alpha_p - (em * dv_dv + kap * di_dv) / d
        beta = beta_p - kap * di_di / d
        gt = np.where(m, g_sp[:, k_sp], 0.0)
        c_v[rows, k] += gt * alpha
        c_i[rows, k] += gt * beta
        # the spike shifts its slot start by one: dt/da_start = 1
        opener = m & (k >= 1)
        np.add.at(g_a, (rows[opener], k[opener] - 1), gt[opener])
        # end-of-slot Jacobian, valid if this is the last spike of the slot
        u_m = t_r - a0
        with np.errstate(invalid="ignore"):
            delta = np.where(np.isfinite(a_end[rows, k]), a_end[rows, k] - t_r, 0.0)
        i_m = i0 * np.exp(-u_m / p.tau_s)
        dvend_du = (
            p.v_reset * np.exp(-delta / p.tau_m) / p.tau_m
            - kernel_derivative(delta, p) * i_m
            - kernel(delta, p) * i_m / p.tau_s
        )
        upd = m & (k < nc)
        ru, ku = rows[upd], k[upd]
        j00[ru, ku] = (dvend_du * alpha)[upd]
        j01[ru, ku] = (dvend_du * beta + kernel(delta, p) * np.exp(-u_m / p.tau_s))[upd]
        prev_slot = np.where(m, k, prev_slot)
        prev_t = np.where(m, t_r, prev_t)

    # reverse recurrence in (I, V) order: upper-triangular maps again
    comps = [j11, j01, j00, c_i, c_v]
    if scan_method == "loop":
        # slot-major copies so each step touches contiguous memory
        t00, t01, t11, tcv, tci = (np.ascontiguousarray(c.T) for c in (j00, j01, j11, c_v, c_i))
        g_i = np.zeros((e + 2, r))
        g_v = np.zeros((e + 2, r))
        for k in range(e, -1, -1):
            g_v[k] = t00[k] * g_v[k + 1] + tcv[k]
            g_i[k] = t01[k] * g_v[k + 1] + t11[k] * g_i[k + 1] + tci[k]
        g_i, g_v = g_i[:-1].T, g_v[:-1].T
    else:
        out = scan_components([c[:, ::-1] for c in comps], scan_method)
        g_i = out[3][:, ::-1]
        g_v = out[4][:, ::-1]

    valid = slots[None, :e] < nc[:, None]
    g_w = np.where(valid, g_i[:, 1:], 0.0)
    i_pre = I - w
    flow_v = (i_pre - V) / p.tau_m
    flow_i = -i_pre / p.tau_s
    end_term = np.where(valid, g_v[:, 1:] * flow_v + g_i[:, 1:] * flow_i, 0.0)
    g_a += end_term
    g_a[:, :-1] -= end_term[:, 1:]
    return g_a.reshape(b, n, e), g_w.reshape(b, n, e)


def route_vjp(queues: EventQueues, n_src: int, n_per_src: int, g_times, g_weights, need_src: bool = True):
    """Scatter event gradients back to weights, delays and source spike times.

    Returns ``(g_w, g_d, g_src)`` with shapes (N, J), (N, J), (B, J, S).
    The delay gradient equals the weight-matrix-shaped sum of event time
    gradients because an arrival time is t_source + d.
    """
    b, n, e = queues.shape
    src = np.broadcast_to(queues.source, (b, n, e))
    valid = src >= 0
    j = np.where(valid, src // n_per_src, 0)
    flat_w = (np.arange(n)[None, :, None] * n_src + j)[valid]
    g_w = np.bincount(flat_w, weights=np.asarray(g_weights)[valid], minlength=n * n_src).reshape(n, n_src)
    g_t = np.asarray(g_times)[valid]
    g_d = np.bincount(flat_w, weights=g_t, minlength=n * n_src).reshape(n, n_src)
    g_src = None
    if need_src:
        flat_s = (np.arange(b)[:, None, None] * (n_src * n_per_src) + np.where(valid, src, 0))[valid]
        g_src = np.bincount(flat_s, weights=g_t, minlength=b * n_src * n_per_src).reshape(b, n_src, n_per_src)
    return g_w, g_d, g_src


@dataclass
class Node:
    """One recorded operation: ``vjp`` maps the output adjoint to a dict of
    input adjoints keyed by tensor name."""

    name: str
    inputs: tuple
    output: str
    vjp: Callable[[Any], dict]


@dataclass
class Tape:
    """Ordered record of event-graph operations for reverse replay."""

    nodes: list = field(default_factory=list)
    values: dict = field(default_factory=dict)

    def record(self, name: str, inputs: tuple, output: str, vjp: Callable[[Any], dict]) -> None:
        self.nodes.append(Node(name, tuple(inputs), output, vjp))


def backward(tape: Tape, loss_grad: float = 1.0, loss_name: str = "loss") -> dict:
    """Replay the tape in reverse and return adjoints of every tensor name.

    Adjoints of the same tensor from several consumers are summed; a missing
    adjoint counts as zero and its producer is skipped.
    """
    adj: dict = {loss_name: np.asarray(loss_grad, float)}
    for node in reversed(tape.nodes):
        g = adj.get(node.output)
        if g is None:
            continue
        for key, val in node.vjp(g).items():
            if val is None:
                continue
            adj[key] = adj[key] + val if key in adj else val
    return adj
