"""Self-checks behind the ``solver-check`` and ``gradcheck`` commands and the
engine equivalence test."""

from __future__ import annotations

import numpy as np

from .engine import layer_forward, plan_chunks, route_spikes, serial_forward
from .lif import LifParams, NeuronState, peak_time
from .network import LayerParams, Network, RegularizerConfig, forward, gradients
from .readout import ReadoutParams
from .solver import SolverConfig, _residual, solve

CHECK_LIF = dict(tau_m=0.02, tau_s=0.01, v_th=1.0)
F32_GAP = float(np.nextafter(np.float32(1.0), np.float32(2.0)) - np.float32(1.0))


def analytic_spike_time(w, tau_m: float = 0.02, v_th: float = 1.0):
    """First crossing from rest after a kick of size w when tau_m = 2 tau_s.

    With x = exp(-t/tau_m) the voltage is w (x - x^2), so the crossing solves
    a quadratic in x and the earlier time takes the larger root.
    """
    w = np.asarray(w, float)
    x = 0.5 * (1.0 + np.sqrt(1.0 - 4.0 * v_th / w))
    return -tau_m * np.log(x)


def check_weights(n: int = 200, grazing_margin: float = 1e-4, w_max: float = 1000.0) -> np.ndarray:
    """Drive strengths from a grazing crossing (peak = v_th + margin) to strong."""
    w_graze = 4.0 * (CHECK_LIF["v_th"] + grazing_margin)
    return np.concatenate([[w_graze], np.geomspace(w_graze, w_max, n)[1:], [5.0]])


def solver_check(float32: bool = False, n: int = 200) -> dict:
    """Compare both root solvers with the closed-form spike time.

    Returns per-solver maximum absolute time errors, the maximum residual
    |V(t*) - v_th|, and for float32 the representable gap above 1.0.
    """
    dtype = "float32" if float32 else "float64"
    p = LifParams(CHECK_LIF["tau_m"], CHECK_LIF["tau_s"], CHECK_LIF["v_th"], dtype=dtype)
    w = check_weights(n)
    exact = analytic_spike_time(w, p.tau_m, p.v_th)
    state = NeuronState(np.zeros_like(w), w)
    t_hi = peak_time(np.zeros_like(w), w, LifParams(p.tau_m, p.tau_s, p.v_th))
    report = {"dtype": dtype, "n": int(w.size), "w_min": float(w.min()), "w_max": float(w.max())}
    for method in ("newton", "bisection"):
        cfg = SolverConfig(method)
        sol = solve(state, t_hi, cfg, p)
        t = np.asarray(sol.t_star, float)
        report[method] = {
            "iters": cfg.max_iters,
            "max_abs_err": float(np.abs(t - exact).max()),
            "max_residual": float(np.abs(np.asarray(sol.residual, float)).max()),
            "err_w5": float(abs(t[-1] - exact[-1])),
        }
    report["t_star_w5"] = float(exact[-1])
    report["f32_gap"] = F32_GAP
    return report


def solver_check_passes(report: dict, tol: float = 1e-7) -> bool:
    """float64: both solvers within ``tol`` seconds of the closed form.
    float32: the Newton residual stays within one float32 step above 1.0."""
    if report["dtype"] == "float32":
        return report["newton"]["max_residual"] <= report["f32_gap"]
    return all(report[m]["max_abs_err"] <= tol for m in ("newton", "bisection"))


def f32_residual(w) -> np.ndarray:
    """|V(t*) - 1| evaluated in float32 at the float32 Newton solution."""
    p = LifParams(CHECK_LIF["tau_m"], CHECK_LIF["tau_s"], CHECK_LIF["v_th"], dtype="float32")
    w = np.asarray(w, np.float32)
    t_hi = peak_time(np.zeros_like(w), w, p)
    sol = solve(NeuronState(np.zeros_like(w), w), t_hi, SolverConfig(), p)
    return np.abs(_residual(np.zeros_like(w), w, np.asarray(sol.t_star, np.float32), p)[0])


# Finite differences -------------------------------------------------------


def random_net(rng: np.random.Generator, n_in: int = 4, delays: bool = True, engine: str = "parallel") -> Network:
    """A small 2-hidden-layer network with delays on every projection."""
    p = LifParams(0.02, 0.005)
    r = ReadoutParams(0.05, 0.1, 20.0, 3)
    h = int(rng.integers(3, 9))

    def layer(mu, sd, shape):
        raw = rng.normal(-0.1, 0.05, shape) if delays else None
        return LayerParams(rng.normal(mu, sd, shape), raw, delays, 25.0)

    layers = [layer(1.5, 1.5, (h, n_in)), layer(0.5, 1.0, (h, h)), layer(0.0, 1.0, (3, h))]
    return Network(layers, p, r, (3, 3), chunk_size=4, engine=engine)


def _layout(res) -> list:
    """Spike counts, consumed counts and spike-to-interval assignment."""
    out = []
    for r in res.layers:
        out += [r.trace.n_spikes.copy(), r.trace.n_consumed.copy(), r.trace.spike_after.copy()]
    return out


def gradcheck(seed: int = 0, n_nets: int = 10, probes: int = 3, reg: RegularizerConfig | None = None) -> dict:
    """Tape gradients against central differences on random small networks.

    Probes whose perturbation changes any layer's spike count, or moves a
    spike across an input event, are skipped (the loss is discontinuous
    there: the regularizer assigns V_max terms per interval), as are
    networks with a spike whose slope at threshold is within ten times the
    solver's derivative floor.
    """
    rng = np.random.default_rng(seed)
    reg = reg or RegularizerConfig(2.0, 0.1)
    worst = 0.0
    n_ok = n_skip = n_singular = 0
    rows = []
    for trial in range(n_nets):
        net = random_net(rng, engine=("parallel", "serial")[trial % 2])
        x = rng.uniform(0, 0.02, (3, net.n_inputs, 3))
        labels = rng.integers(0, 3, 3)
        res = forward(net, x, labels, reg, record=True)
        slopes = np.concatenate([np.abs(r.trace.spike_slopes(net.lif)).ravel() for r in res.layers])
        slopes = slopes[np.isfinite(slopes)]
        if slopes.size and slopes.min() <= 10 * net.solver.deriv_floor:
            n_singular += 1
            continue
        g = gradients(net, res)
        base = _layout(res)

        def loss_and_counts():
            rr = forward(net, x, labels, reg)
            return rr.loss, _layout(rr)

        for name, arr in net.param_arrays().items():
            for _ in range(probes):
                idx = tuple(int(rng.integers(s)) for s in arr.shape)
                h = 1e-6 if name[0] == "w" else 1e-5
                old = arr[idx]
                arr[idx] = old + h
                lp, cp = loss_and_counts()
                arr[idx] = old - h
                lm, cm = loss_and_counts()
                arr[idx] = old
                if any((a != b).any() for a, b in zip(cp + cm, base + base)):
                    n_skip += 1
                    continue
                fd = (lp - lm) / (2 * h)
                an = float(g[name][idx])
                err = abs(fd - an) / max(abs(fd), 1e-6)
                worst = max(worst, err)
                n_ok += 1
                rows.append({"net": trial, "param": name, "index": list(idx), "fd": fd, "tape": an, "rel_err": err})
    return {"max_rel_err": worst, "probes": n_ok, "skipped": n_skip, "singular_nets": n_singular, "rows": rows}


# Engine equivalence --------------------------------------------------------


def random_layer_stack(rng: np.random.Generator):
    """Random feedforward stack: input spikes, weights, optional delays."""
    n_layers = int(rng.integers(1, 4))
    b = int(rng.integers(1, 4))
    j = int(rng.integers(1, 40))
    s = int(rng.integers(1, 5))
    while j * s > 500:
        s -= 1
    x = rng.uniform(0, 0.05, (b, j, s))
    x[rng.random(x.shape) < 0.3] = np.inf
    x = np.sort(x, axis=-1)
    sizes = [j] + [int(rng.integers(1, 65)) for _ in range(n_layers)]
    ws, ds = [], []
    for a, c in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.normal(0.5, 1.0, (c, a)) * rng.uniform(0.2, 3.0))
        ds.append(rng.uniform(0, 0.01, (c, a)) if rng.random() < 0.5 else None)
    s_max = [int(rng.integers(1, 7)) for _ in range(n_layers)]
    return x, ws, ds, s_max


def equivalence_check(n_nets: int = 100, seed: int = 0, ks=(8, 32, 128)) -> dict:
    """Chunked parallel layers against the serial loop on random stacks.

    Both engines run on the serial engine's input at every layer so that a
    mismatch is attributed to the layer where it appears.
    """
    rng = np.random.default_rng(seed)
    p = LifParams(0.02, 0.005)
    cfg = SolverConfig()
    worst = 0.0
    count_mismatch = 0
    layers = 0
    spikes = 0
    for _ in range(n_nets):
        x, ws, ds, s_max = random_layer_stack(rng)
        src = x
        for w, d, cap in zip(ws, ds, s_max):
            q = route_spikes(src, w, d)
            ref = serial_forward(q, p, cap, cfg)
            n_ev = max(int(q.counts.max(initial=1)), 1)
            for k in ks:
                out = layer_forward(q, p, plan_chunks(n_ev, k, [cap], [w.shape[0]]), cfg)
                same = np.array_equal(out.trace.n_spikes, ref.trace.n_spikes) and not out.metrics.unfinished.any()
                if not same:
                    count_mismatch += 1
                    continue
                m = np.isfinite(ref.spike_times)
                if not np.array_equal(m, np.isfinite(out.spike_times)):
                    count_mismatch += 1
                    continue
                worst = max(worst, float(np.abs(out.spike_times[m] - ref.spike_times[m]).max(initial=0.0)))
            layers += 1
            spikes += int(ref.trace.n_spikes.sum())
            src = ref.spike_times
    return {"nets": n_nets, "layers": layers, "spikes": spikes, "count_mismatches": count_mismatch, "max_time_diff": worst}
