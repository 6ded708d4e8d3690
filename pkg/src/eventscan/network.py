"""Feedforward event-driven network: forward pass, losses and gradients.

A network is a stack of spiking LIF layers followed by a non-spiking
leaky-integrator readout.  Every synaptic projection routes spike times into
sorted event queues of the next layer; the forward pass records each step on
a tape whose reverse replay yields exact gradients for all weights and
delays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward, lif_layer_vjp, route_vjp, trace_intervals
from .engine import LayerResult, WorkMetrics, layer_forward, plan_chunks, route_spikes, serial_forward
from .lif import LifParams
from .readout import ReadoutParams, logits as readout_logits, logits_vjp
from .scan import DepthCounter
from .solver import SolverConfig


def softplus(x, beta: float):
    """(1/beta) log(1 + exp(beta x)), computed without overflow."""
    return np.logaddexp(0.0, beta * np.asarray(x)) / beta


def softplus_grad(x, beta: float):
    z = beta * np.asarray(x)
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass
class LayerParams:
    """Incoming projection of one layer: weights (n_out, n_in) and optional
    delays stored before the softplus activation."""

    weights: np.ndarray
    raw_delays: np.ndarray | None = None
    use_delays: bool = False
    beta_sp: float = 5.0
    alpha_mu: float = 0.8
    alpha_sigma: float = 0.8

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, float)
        if self.use_delays:
            if self.raw_delays is None:
                raise ValueError("delayed layer needs raw delays")
            self.raw_delays = np.asarray(self.raw_delays, float)
            if self.raw_delays.shape != self.weights.shape:
                raise ValueError("delay and weight shapes differ")

    @property
    def shape(self) -> tuple:
        return self.weights.shape

    def delays(self) -> np.ndarray | None:
        return softplus(self.raw_delays, self.beta_sp) if self.use_delays else None


@dataclass(frozen=True)
class RegularizerConfig:
    c_target: float = 3.0
    lambda_reg: float = 1e-5

    def __post_init__(self) -> None:
        if not self.c_target > 0 or self.lambda_reg < 0:
            raise ValueError("need c_target > 0 and lambda_reg >= 0")


@dataclass
class Network:
    """Spiking hidden layers plus a readout; ``layers[-1]`` is the readout."""

    layers: list
    lif: LifParams
    readout: ReadoutParams
    s_max: tuple
    chunk_size: int = 128
    solver: SolverConfig = field(default_factory=SolverConfig)
    engine: str = "parallel"
    scan_method: str = "sklansky"

    def __post_init__(self) -> None:
        if len(self.s_max) != len(self.layers) - 1:
            raise ValueError("one spike cap per hidden layer expected")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError("layer shapes do not chain")
        if self.layers[-1].shape[0] != self.readout.n_cls:
            raise ValueError("readout size must equal the number of classes")
        if self.engine not in ("parallel", "serial"):
            raise ValueError(f"unknown engine {self.engine!r}")

    @property
    def hidden_sizes(self) -> list:
        return [layer.shape[0] for layer in self.layers[:-1]]

    @property
    def n_inputs(self) -> int:
        return self.layers[0].shape[1]

    def param_arrays(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"w{i}"] = layer.weights
            if layer.use_delays:
                out[f"d{i}"] = layer.raw_delays
        return out


@dataclass
class LayerGrad:
    """Adjoint of a spiking layer output: spike times and interval V_max."""

    spikes: np.ndarray | None = None
    vmax: np.ndarray | None = None

    def __add__(self, other: "LayerGrad") -> "LayerGrad":
        def add(a, b):
            if a is None:
                return b
            return a if b is None else a + b

        return LayerGrad(add(self.spikes, other.spikes), add(self.vmax, other.vmax))


@dataclass
class EventGrad:
    times: np.ndarray
    weights: np.ndarray

    def __add__(self, other: "EventGrad") -> "EventGrad":
        return EventGrad(self.times + other.times, self.weights + other.weights)


@dataclass
class ForwardResult:
    logits: np.ndarray
    layers: list
    loss: float | None = None
    ce: float | None = None
    reg: float | None = None
    tape: Tape | None = None

    @property
    def metrics(self) -> list:
        return [r.metrics for r in self.layers]


def quantize_spike_times(spikes, delta_t: float):
    """Round spike times to the nearest multiple of ``delta_t``.

    Halves round away from zero.  The ratio is snapped to 9 decimals first so
    that values such as 0.0045 / 0.003 land on the intended half.  Missing
    spikes (+inf) stay missing; ``delta_t = 0`` is the identity.
    """
    if delta_t < 0:
        raise ValueError("delta_t must be non-negative")
    spikes = np.asarray(spikes, float)
    if delta_t == 0:
        return spikes
    finite = np.isfinite(spikes)
    ratio = np.round(np.where(finite, spikes, 0.0) / delta_t, 9)
    steps = np.sign(ratio) * np.floor(np.abs(ratio) + 0.5)
    return np.where(finite, steps * delta_t, spikes)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, float)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


def spike_count_regularizer(vmax_layers, spiked_layers, valid_layers, v_th: float, cfg: RegularizerConfig):
    """Membrane-potential proxy that pulls spike counts towards c_target.

    Inputs are per layer arrays shaped (B, N, E): V_max of every interval,
    whether an output spike fell in it, and whether it was reached.  A
    neuron's spike count is its number of spiking intervals.  Silent
    intervals of under-active neurons are pushed up to threshold, spiking
    intervals of over-active neurons down to it.  Returns the loss and its
    gradient w.r.t. each V_max array.
    """
    n_total = sum(v.shape[1] for v in vmax_layers)
    total = 0.0
    grads = []
    for vmax, spiked, valid in zip(vmax_layers, spiked_layers, valid_layers):
        b = vmax.shape[0]
        silent = valid & ~spiked
        n_sp = spiked.sum(-1)
        n_si = silent.sum(-1)
        under = np.where(silent, np.maximum(v_th - vmax, 0.0), 0.0)
        over = np.where(spiked, np.maximum(vmax - v_th, 0.0), 0.0)
        inv_si = np.where(n_si > 0, 1.0 / np.maximum(n_si, 1), 0.0)
        inv_sp = np.where(n_sp > 0, 1.0 / np.maximum(n_sp, 1), 0.0)
        l_under = (under.sum(-1) * inv_si).mean(0)
        l_over = (over.sum(-1) * inv_sp).mean(0)
        c_bar = n_sp.mean(0)
        gate_u = np.maximum(1.0 - c_bar / cfg.c_target, 0.0)
        gate_o = np.maximum(c_bar / cfg.c_target - 1.0, 0.0)
        total += float((gate_u * l_under + gate_o * l_over).sum())
        g_under = -(silent & (vmax < v_th)).astype(float) * (inv_si * gate_u / b)[..., None]
        g_over = (spiked & (vmax > v_th)) * (inv_sp * gate_o / b)[..., None]
        grads.append((g_under + g_over) / n_total)
    return total / n_total, grads


def _run_layer(net: Network, queues, i: int, counter: DepthCounter | None) -> LayerResult:
    if net.engine == "serial":
        return serial_forward(queues, net.lif, net.s_max[i], net.solver)
    n_events = int(np.max(queues.counts, initial=1))
    plan = plan_chunks(max(n_events, 1), net.chunk_size, [net.s_max[i]], [queues.shape[1]])
    return layer_forward(queues, net.lif, plan, net.solver, 0, net.scan_method, counter)


def forward(
    net: Network,
    inputs: np.ndarray,
    labels: np.ndarray | None = None,
    reg: RegularizerConfig | None = None,
    record: bool = False,
    delta_t: float = 0.0,
    counter: DepthCounter | None = None,
) -> ForwardResult:
    """Run the network on input spikes (B, C, S) (+inf marks no spike).

    With ``labels`` the loss is assembled; with ``record`` a tape is kept for
    :func:`gradients`.  A positive ``delta_t`` quantizes input and hidden
    spike times (hidden ones with a straight-through gradient).
    """
    tape = Tape() if record else None
    x = quantize_spike_times(inputs, delta_t)
    results = []
    src = x
    for i, layer in enumerate(net.layers):
        delays = layer.delays()
        q = route_spikes(src, layer.weights, delays)
        if tape is not None:
            _record_route(tape, i, q, layer, src.shape, "x" if i == 0 else f"h{i - 1}")
        if i == len(net.layers) - 1:
            out = readout_logits(q, net.lif, net.readout, net.scan_method)
            if tape is not None:
                _record_readout(tape, i, q, net)
            break
        res = _run_layer(net, q, i, counter)
        results.append(res)
        if tape is not None:
            _record_lif(tape, i, res, net)
        src = res.spike_times
        if delta_t > 0:
            src = quantize_spike_times(src, delta_t)
    result = ForwardResult(out, results, tape=tape)
    if labels is not None:
        ce, g_logits = cross_entropy(out, labels)
        result.ce = ce
        result.loss = ce
        reg_val = 0.0
        if reg is not None:
            infos = [trace_intervals(r.trace, net.lif) for r in results]
            reg_val, g_vmax = spike_count_regularizer(
                [f["vmax"] for f in infos], [f["spiked"] for f in infos], [f["valid"] for f in infos], net.lif.v_th, reg
            )
            result.loss = ce + reg.lambda_reg * reg_val
            if tape is not None:
                for i, gv in enumerate(g_vmax):
                    tape.record("regularizer", (f"h{i}",), "reg", _reg_vjp(i, gv, reg.lambda_reg))
        result.reg = reg_val
        if tape is not None:
            tape.record("cross_entropy", ("logits",), "ce", lambda g, gl=g_logits: {"logits": float(g) * gl})
            tape.record("loss", ("ce", "reg"), "loss", lambda g: {"ce": g, "reg": g})
    return result


def _reg_vjp(i, gv, lam):
    return lambda g: {f"h{i}": LayerGrad(vmax=lam * float(g) * gv)}


def _record_route(tape: Tape, i: int, q, layer: LayerParams, src_shape, src_name: str) -> None:
    n_src, n_per = src_shape[1], src_shape[2]
    need_src = src_name != "x"

    def vjp(g: EventGrad):
        g_w, g_d, g_src = route_vjp(q, n_src, n_per, g.times, g.weights, need_src)
        out = {f"w{i}": g_w}
        if layer.use_delays:
            out[f"d{i}"] = g_d * softplus_grad(layer.raw_delays, layer.beta_sp)
        if need_src:
            out[src_name] = LayerGrad(spikes=g_src)
        return out

    tape.record("route", (f"w{i}", f"d{i}", src_name), f"q{i}", vjp)


def _record_lif(tape: Tape, i: int, res: LayerResult, net: Network) -> None:
    def vjp(g: LayerGrad):
        s = res.spike_times
        g_sp = np.zeros(s.shape) if g.spikes is None else np.where(np.isfinite(s), g.spikes, 0.0)
        method = "loop" if net.engine == "serial" else net.scan_method
        g_t, g_w = lif_layer_vjp(res.trace, net.lif, net.solver, g_sp, g.vmax, method)
        return {f"q{i}": EventGrad(g_t, g_w)}

    tape.record("lif", (f"q{i}",), f"h{i}", vjp)


def _record_readout(tape: Tape, i: int, q, net: Network) -> None:
    def vjp(g):
        g_t, g_w = logits_vjp(q, net.lif, net.readout, g)
        return {f"q{i}": EventGrad(g_t, g_w)}

    tape.record("readout", (f"q{i}",), "logits", vjp)


def gradients(net: Network, result: ForwardResult, loss_grad: float = 1.0) -> dict:
    """Parameter gradients from a recorded forward pass."""
    if result.tape is None:
        raise ValueError("forward pass was not recorded")
    adj = backward(result.tape, loss_grad)
    grads = {}
    for name, arr in net.param_arrays().items():
        g = adj.get(name)
        grads[name] = np.zeros_like(arr) if g is None else np.asarray(g, float)
    return grads


def merge_metrics(metrics: list) -> dict:
    """Totals over a list of WorkMetrics records."""
    keys = ("received", "consumed", "processed", "output_spikes", "capped", "unfinished")
    tot = {k: sum(int(getattr(m, k).sum()) for m in metrics) for k in keys}
    tot["fraction_consumed"] = tot["consumed"] / tot["received"] if tot["received"] else 1.0
    tot["fraction_retained"] = tot["consumed"] / tot["processed"] if tot["processed"] else 1.0
    return tot


__all__ = [
    "EventGrad",
    "ForwardResult",
    "LayerGrad",
    "LayerParams",
    "Network",
    "RegularizerConfig",
    "WorkMetrics",
    "cross_entropy",
    "forward",
    "gradients",
    "merge_metrics",
    "quantize_spike_times",
    "softplus",
    "spike_count_regularizer",
]
