"""Builds datasets, networks and optimizers from a RunConfig and runs them."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import SpikeDataset, generate_yinyang, load_mnist_latency, split
from .lif import LifParams
from .network import Network, RegularizerConfig
from .readout import ReadoutParams
from .solver import SolverConfig
from .training import Adam, InitSpec, Schedule, TrainConfig, TrainState, build_network, estimate_nu0, new_state


@dataclass
class Datasets:
    train: SpikeDataset
    val: SpikeDataset
    test: SpikeDataset


def load_datasets(cfg: RunConfig) -> Datasets:
    d = cfg.data
    if cfg.dataset == "yinyang":
        kw = dict(t_late=d.t_late, bias_spike=d.bias_spike, r_small=d.r_small, r_big=d.r_big, bias_time=d.bias_time)
        # fixed data seeds keep the split identical across model seeds
        return Datasets(
            generate_yinyang(d.n_train, seed=42, **kw),
            generate_yinyang(d.n_val, seed=41, **kw),
            generate_yinyang(d.n_test, seed=40, **kw),
        )
    root = Path(d.mnist_dir)
    if not root.is_absolute() and not root.exists():
        # fall back to the repository checkout for relative paths
        root = Path(__file__).resolve().parents[2] / d.mnist_dir
    full = load_mnist_latency(root / "images-idx3-ubyte", root / "labels-idx1-ubyte", d.t_late)
    train, val, test = split(full, [d.n_train, d.n_val, d.n_test], seed=0, stratify=True)
    return Datasets(train, val, test)


def lif_params(cfg: RunConfig) -> LifParams:
    c = cfg.lif
    return LifParams(c.tau_m, c.tau_s, c.v_th, c.v_reset, "float32" if cfg.float32 else "float64")


def make_network(cfg: RunConfig, train: SpikeDataset, seed: int | None = None) -> Network:
    seed = cfg.seed if seed is None else seed
    nu = estimate_nu0(train.spikes, train.duration, cfg.train.batch_size, cfg.data.nu0_batches)
    r = cfg.readout
    readout = ReadoutParams(r.tau_li, r.tau_max, r.temperature, train.n_classes)
    solver = SolverConfig(cfg.solver.method, cfg.solver.max_iters, cfg.solver.deriv_floor)
    net = build_network(
        train.n_channels,
        cfg.model.hidden,
        train.n_classes,
        lif_params(cfg),
        readout,
        cfg.model.s_max,
        InitSpec(cfg.init.alpha_mu, cfg.init.alpha_sigma, nu),
        seed,
        chunk_size=cfg.model.chunk_size,
        solver=solver,
        engine=cfg.model.engine,
        use_delays=cfg.model.use_delays,
        beta_sp=cfg.init.beta_sp,
        delay_init=cfg.init.delay_init,
    )
    net.scan_method = cfg.model.scan_method
    return net


def make_optimizer(cfg: RunConfig, steps_per_epoch: int) -> Adam:
    o = cfg.optim

    def sched(peak, end):
        return Schedule(o.schedule, peak, end, o.warmup, o.decay_steps, o.decay_rate, max(steps_per_epoch, 1))

    return Adam(sched(o.lr, o.lr_end), sched(o.delay_lr, o.delay_lr_end))


def train_config(cfg: RunConfig, delta_t: float = 0.0, epochs: int | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.epochs if epochs is None else epochs,
        batch_size=t.batch_size,
        patience=t.patience,
        reg=RegularizerConfig(t.c_target, t.lambda_reg),
        bump_value=t.bump_value,
        bump_steps=t.bump_steps,
        dropout_max=cfg.data.dropout,
        jitter_sigma=cfg.data.jitter,
        delta_t=delta_t,
        max_missing=t.max_missing,
    )


def new_run(cfg: RunConfig, data: Datasets, seed: int | None = None) -> TrainState:
    seed = cfg.seed if seed is None else seed
    net = make_network(cfg, data.train, seed)
    steps = -(-len(data.train) // cfg.train.batch_size)
    return new_state(net, make_optimizer(cfg, steps), seed)


class JsonlWriter:
    """Append-only metrics stream, one JSON object per line, flushed per record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(_plain(record)) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x
