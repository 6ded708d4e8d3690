"""Training: initialization, Adam with learning-rate schedules, weight
bumping, the epoch loop and checkpoints."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import SpikeDataset, augment
from .lif import LifParams
from .network import (
    ForwardResult,
    LayerParams,
    Network,
    RegularizerConfig,
    forward,
    gradients,
    merge_metrics,
)

CHECKPOINT_VERSION = 1


class NumericalAbort(RuntimeError):
    """Raised when the loss or a gradient becomes non-finite."""


@dataclass(frozen=True)
class InitSpec:
    alpha_mu: float = 0.8
    alpha_sigma: float = 0.8
    nu0: float = 100.0

    def __post_init__(self) -> None:
        if min(self.alpha_mu, self.alpha_sigma, self.nu0) <= 0:
            raise ValueError("init gains and rate must be positive")


def init_moments(spec: InitSpec, fan_in: int, p: LifParams) -> tuple:
    """Mean and standard deviation of the initial weights of a layer.

    Scaled so that fan_in inputs firing at rate nu0 drive the membrane to a
    fixed fraction of threshold over one membrane time constant.
    """
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    drive = fan_in * spec.nu0 * p.tau_m
    return spec.alpha_mu * p.v_th / drive, spec.alpha_sigma * p.v_th / math.sqrt(drive)


def init_weights(spec: InitSpec, fan_in: int, fan_out: int, p: LifParams, seed) -> np.ndarray:
    mu, sigma = init_moments(spec, fan_in, p)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.normal(mu, sigma, size=(fan_out, fan_in))


def estimate_nu0(spikes: np.ndarray, duration: float, batch_size: int = 128, n_batches: int = 10) -> float:
    """Average input spikes per channel per second over the first batches."""
    spikes = np.asarray(spikes)
    if spikes.size == 0 or len(spikes) == 0:
        raise ValueError("no data to estimate the input rate from")
    if duration <= 0:
        raise ValueError("duration must be positive")
    sample = spikes[: batch_size * n_batches]
    per_channel = np.isfinite(sample).sum(axis=2).mean()
    return float(per_channel / duration)


def bump_weights(net: Network, silent_counters: list, spike_counts: list, bump_value: float = 0.02, bump_steps: int = 2):
    """Raise incoming weights of hidden neurons that stayed silent.

    ``spike_counts`` holds each hidden layer's per-neuron output spike count
    for the last batch.  A neuron silent for ``bump_steps`` consecutive
    batches gets ``bump_value`` added to all its incoming weights and its
    counter restarts.  Returns the number of bumped neurons.
    """
    bumped = 0
    for i, (counter, counts) in enumerate(zip(silent_counters, spike_counts)):
        silent = np.asarray(counts) == 0
        counter[:] = np.where(silent, counter + 1, 0)
        due = counter >= bump_steps
        if due.any():
            net.layers[i].weights[due] += bump_value
            counter[due] = 0
            bumped += int(due.sum())
    return bumped


@dataclass(frozen=True)
class Schedule:
    """Linear warmup from 0, then cosine or exponential decay.

    ``cosine``: decays from ``peak`` to ``end`` between ``warmup`` and
    ``decay_steps`` (the count includes warmup).  ``exponential``: multiplies
    by ``decay_rate`` every ``transition_steps`` after warmup, floored at
    ``end``.
    """

    kind: str = "cosine"
    peak: float = 0.02
    end: float = 1e-4
    warmup: int = 2000
    decay_steps: int = 6000
    decay_rate: float = 0.95
    transition_steps: int = 40

    def __post_init__(self) -> None:
        if self.kind not in ("cosine", "exponential", "constant"):
            raise ValueError(f"unknown schedule {self.kind!r}")

    def __call__(self, step: int) -> float:
        if self.kind == "constant":
            return self.peak
        if step < self.warmup:
            return self.peak * step / self.warmup
        k = step - self.warmup
        if self.kind == "cosine":
            span = max(self.decay_steps - self.warmup, 1)
            frac = min(k / span, 1.0)
            return self.end + (self.peak - self.end) * 0.5 * (1 + math.cos(math.pi * frac))
        return max(self.peak * self.decay_rate ** (k / self.transition_steps), self.end)


@dataclass
class Adam:
    """Adam with bias correction; one schedule for weights, one for delays."""

    weight_schedule: Schedule
    delay_schedule: Schedule
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict) -> None:
        """In-place update of the arrays in ``params``."""
        lr_w = self.weight_schedule(self.step)
        lr_d = self.delay_schedule(self.step)
        self.step += 1
        t = self.step
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mhat = self.m[name] / (1 - self.b1**t)
            vhat = self.v[name] / (1 - self.b2**t)
            lr = lr_d if name.startswith("d") else lr_w
            params[name] -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    patience: int | None = None
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    bump_value: float = 0.02
    bump_steps: int = 2
    dropout_max: float = 0.0
    jitter_sigma: float = 0.0
    delta_t: float = 0.0
    max_missing: float = 0.0
    eval_batch_size: int = 256


@dataclass
class TrainState:
    net: Network
    opt: Adam
    rng: np.random.Generator
    silent: list
    epoch: int = 0
    best_val: float = -1.0
    best_params: dict | None = None
    stale: int = 0


def new_state(net: Network, opt: Adam, seed: int) -> TrainState:
    return TrainState(net, opt, np.random.default_rng(seed), [np.zeros(n, np.int64) for n in net.hidden_sizes])


def train_step(batch: tuple, state: TrainState, cfg: TrainConfig) -> dict:
    """Forward, loss, backward, Adam update and weight bumping on one batch."""
    x, y = batch
    net = state.net
    res = forward(net, x, y, cfg.reg, record=True, delta_t=cfg.delta_t)
    if not np.isfinite(res.loss):
        raise NumericalAbort(f"non-finite loss {res.loss} at step {state.opt.step}")
    grads = gradients(net, res)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for {name} at step {state.opt.step}")
    state.opt.update(net.param_arrays(), grads)
    counts = [r.metrics.output_spikes.sum(0) for r in res.layers]
    bumped = bump_weights(net, state.silent, counts, cfg.bump_value, cfg.bump_steps)
    acc = float((res.logits.argmax(1) == y).mean())
    work = merge_metrics(res.metrics)
    return {"loss": res.loss, "ce": res.ce, "reg": res.reg, "acc": acc, "bumped": bumped, **work}


def evaluate(net: Network, ds: SpikeDataset, batch_size: int = 256, delta_t: float = 0.0) -> dict:
    """Accuracy, mean cross-entropy and work metrics on a dataset."""
    correct = 0
    loss = 0.0
    per_layer = [[] for _ in net.hidden_sizes]
    spikes_per_neuron = [0.0 for _ in net.hidden_sizes]
    for x, y in ds.batches(batch_size):
        res: ForwardResult = forward(net, x, y, None, delta_t=delta_t)
        correct += int((res.logits.argmax(1) == y).sum())
        loss += res.ce * len(y)
        for i, r in enumerate(res.layers):
            per_layer[i].append(r.metrics)
            spikes_per_neuron[i] += float(r.metrics.output_spikes.sum())
    n = len(ds)
    layers = [merge_metrics(m) for m in per_layer]
    for i, lay in enumerate(layers):
        lay["spikes_per_neuron"] = spikes_per_neuron[i] / (n * net.hidden_sizes[i])
    return {"acc": correct / n, "loss": loss / n, "layers": layers}


def _copy_params(net: Network) -> dict:
    return {k: v.copy() for k, v in net.param_arrays().items()}


def _restore(net: Network, params: dict) -> None:
    for k, v in net.param_arrays().items():
        v[...] = params[k]


def fit(
    state: TrainState,
    train: SpikeDataset,
    cfg: TrainConfig,
    val: SpikeDataset | None = None,
    log=None,
    max_seconds: float | None = None,
) -> TrainState:
    """Epoch loop with optional early stopping on validation accuracy.

    ``log`` receives one dict per epoch.  With a validation set the best
    parameters seen are restored at the end.
    """
    start = time.monotonic()
    while state.epoch < cfg.epochs:
        t0 = time.monotonic()
        stats = []
        for x, y in train.batches(cfg.batch_size, state.rng):
            if cfg.dropout_max > 0 or cfg.jitter_sigma > 0:
                x = augment(x, cfg.dropout_max, cfg.jitter_sigma, state.rng, train.duration)
            stats.append(train_step((x, y), state, cfg))
        state.epoch += 1
        rec = {
            "epoch": state.epoch,
            "step": state.opt.step,
            "train_loss": float(np.mean([s["loss"] for s in stats])),
            "train_acc": float(np.mean([s["acc"] for s in stats])),
            "reg": float(np.mean([s["reg"] for s in stats])),
            "bumped": int(sum(s["bumped"] for s in stats)),
            "fraction_consumed": float(np.mean([s["fraction_consumed"] for s in stats])),
            "fraction_retained": float(np.mean([s["fraction_retained"] for s in stats])),
            "lr": state.opt.weight_schedule(state.opt.step),
            "seconds": time.monotonic() - t0,
        }
        if cfg.max_missing > 0 and rec["fraction_consumed"] < 1 - cfg.max_missing:
            raise NumericalAbort(f"consumed fraction {rec['fraction_consumed']:.3f} below the allowed minimum")
        if val is not None:
            ev = evaluate(state.net, val, cfg.eval_batch_size, cfg.delta_t)
            rec["val_acc"] = ev["acc"]
            rec["val_loss"] = ev["loss"]
            if ev["acc"] > state.best_val:
                state.best_val = ev["acc"]
                state.best_params = _copy_params(state.net)
                state.stale = 0
            else:
                state.stale += 1
        if log is not None:
            log(rec)
        if cfg.patience is not None and val is not None and state.stale >= cfg.patience:
            break
        if max_seconds is not None and time.monotonic() - start > max_seconds:
            break
    if state.best_params is not None:
        _restore(state.net, state.best_params)
    return state


# Checkpoints -------------------------------------------------------------


def save_checkpoint(path, state: TrainState) -> None:
    """Write parameters, Adam moments, step, bump counters and rng state."""
    net = state.net
    arrays = {f"param/{k}": v for k, v in net.param_arrays().items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.opt.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.opt.v.items()})
    arrays.update({f"silent/{i}": c for i, c in enumerate(state.silent)})
    if state.best_params is not None:
        arrays.update({f"best/{k}": v for k, v in state.best_params.items()})
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": state.opt.step,
        "epoch": state.epoch,
        "best_val": state.best_val,
        "stale": state.stale,
        "rng": state.rng.bit_generator.state,
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path, state: TrainState) -> TrainState:
    """Restore a checkpoint into a state built with the same architecture."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = state.net.param_arrays()
        for k, v in params.items():
            v[...] = z[f"param/{k}"]
        state.opt.m = {k[7:]: z[k].copy() for k in z.files if k.startswith("adam_m/")}
        state.opt.v = {k[7:]: z[k].copy() for k in z.files if k.startswith("adam_v/")}
        state.silent = [z[f"silent/{i}"].copy() for i in range(len(state.silent))]
        best = {k[5:]: z[k].copy() for k in z.files if k.startswith("best/")}
    state.best_params = best or None
    state.opt.step = meta["step"]
    state.epoch = meta["epoch"]
    state.best_val = meta["best_val"]
    state.stale = meta["stale"]
    state.rng.bit_generator.state = meta["rng"]
    return state


def build_network(
    n_inputs: int,
    hidden: list,
    n_cls: int,
    lif: LifParams,
    readout,
    s_max,
    init: InitSpec,
    seed: int,
    chunk_size: int = 128,
    solver=None,
    engine: str = "parallel",
    use_delays=None,
    beta_sp: float = 5.0,
    delay_init: float = 0.1,
    nu_hidden: float | None = None,
) -> Network:
    """Layerwise Gaussian initialization of a fresh network.

    Hidden-to-hidden and readout layers use ``nu_hidden`` (defaults to the
    input rate) as the presynaptic rate estimate.
    """
    from .solver import SolverConfig

    rng = np.random.default_rng(seed)
    sizes = [n_inputs] + list(hidden) + [n_cls]
    use_delays = list(use_delays or [False] * (len(sizes) - 1))
    layers = []
    for i in range(len(sizes) - 1):
        rate = init.nu0 if i == 0 or nu_hidden is None else nu_hidden
        spec = InitSpec(init.alpha_mu, init.alpha_sigma, rate)
        w = init_weights(spec, sizes[i], sizes[i + 1], lif, rng)
        raw = None
        if use_delays[i]:
            d = rng.uniform(0, delay_init, size=w.shape)
            raw = np.log(np.expm1(np.maximum(d, 1e-6) * beta_sp)) / beta_sp
        layers.append(LayerParams(w, raw, use_delays[i], beta_sp, init.alpha_mu, init.alpha_sigma))
    return Network(layers, lif, readout, tuple(s_max), chunk_size, solver or SolverConfig(), engine)
